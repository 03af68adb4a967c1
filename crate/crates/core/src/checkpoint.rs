//! Training checkpoints: a header followed by the encoder, bank and cluster
//! segments, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::bank::{read_exact, truncated, MemoryBank};
use crate::clustering::ClusterState;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ICKP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Number of completed epochs.
    pub epochs_done: u64,
    pub params: EncoderParams<f32>,
    pub bank: MemoryBank,
    pub clusters: ClusterState,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u16::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u64::<LittleEndian>(self.epochs_done)?;
        w.write_f32::<LittleEndian>(self.bank.omega())?;
        self.params.write_to(w)?;
        self.bank.write_to(w)?;
        self.clusters.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "checkpoint magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = r.read_u16::<LittleEndian>().map_err(truncated("checkpoint version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let epochs_done = r.read_u64::<LittleEndian>().map_err(truncated("checkpoint epoch"))?;
        let omega = r.read_f32::<LittleEndian>().map_err(truncated("checkpoint omega"))?;
        let params = EncoderParams::read_from(r)?;
        let bank = MemoryBank::read_from(r, omega)?;
        if bank.dim() != params.embed_dim() {
            return Err(Error::format(format!(
                "bank width {} does not match encoder output {}",
                bank.dim(),
                params.embed_dim()
            )));
        }
        let clusters = ClusterState::read_from(r, &bank)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        Ok(Self { epochs_done, params, bank, clusters })
    }

    /// Writes to a sibling temp file and renames, so a crash mid-write keeps
    /// the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
