//! The complete model file: a PointNet section (`PNW1`) followed by a
//! compression-network section (`CMP1`, ending in the f32 dummy score).

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::affinity::{CompressionNet, DEFAULT_COMPRESSION_WIDTHS};
use crate::error::{Error, Result};
use crate::featurize::{PointNetWeights, DEFAULT_POINTNET_WIDTHS};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub pointnet: PointNetWeights,
    pub compression: CompressionNet,
}

impl ModelWeights {
    pub fn new(pointnet: PointNetWeights, compression: CompressionNet) -> Result<Self> {
        let pair_width = 2 * pointnet.output_width();
        if compression.input_width() != pair_width {
            return Err(Error::Config(format!(
                "compression input width {} does not match paired feature width {pair_width}",
                compression.input_width()
            )));
        }
        Ok(Self { pointnet, compression })
    }

    /// Default-width model with both networks drawn from `seed`.
    pub fn random(seed: u64) -> Result<Self> {
        Self::random_with_widths(&DEFAULT_POINTNET_WIDTHS, &DEFAULT_COMPRESSION_WIDTHS[1..], seed)
    }

    /// `compression_hidden` lists the widths after the pair layer, ending in 1.
    pub fn random_with_widths(pointnet_widths: &[usize], compression_hidden: &[usize], seed: u64) -> Result<Self> {
        let pointnet = PointNetWeights::random(pointnet_widths, seed)?;
        let mut widths = vec![2 * pointnet.output_width()];
        widths.extend_from_slice(compression_hidden);
        let compression = CompressionNet::random(&widths, seed ^ 0xC0FF_EE00_D15E_A5E5)?;
        Self::new(pointnet, compression)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        self.pointnet.write_to(w)?;
        self.compression.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let pointnet = PointNetWeights::read_from(r)?;
        let compression = CompressionNet::read_from(r)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::Format(e.to_string()))? != 0 {
            return Err(Error::Format("trailing bytes after the compression section".into()));
        }
        Self::new(pointnet, compression).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_to(&mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}
