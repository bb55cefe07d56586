//! Weight banks — ordered collections of (z, θ) pairs produced by ancestral
//! sampling — and their binary container format.
//!
//! Container layout (all integers little-endian):
//! magic `HWB1` · version `u16` · arch hash `u64` · z dim `u32` ·
//! member count `u32` · per member the z then the θ coordinates as `f64`
//! arrays · trailing CRC-32 over every preceding byte.

use std::path::Path;

use crate::error::{Error, Result};
use crate::report::write_atomic;
use crate::rng::fnv1a64;
use crate::target::{ArchDescriptor, WeightVector};
use crate::tensor::Tensor;

pub const BANK_MAGIC: [u8; 4] = *b"HWB1";
pub const BANK_VERSION: u16 = 1;
/// Bytes before the member payload: magic, version, arch hash, z dim, count.
const HEADER_LEN: usize = 4 + 2 + 8 + 4 + 4;

/// 64-bit identity of a target architecture, stored in bank files so a bank
/// cannot silently be loaded into the wrong experiment.
pub fn arch_hash(arch: &ArchDescriptor) -> u64 {
    fnv1a64(arch.canonical_string().as_bytes())
}

/// Identity used for toy-experiment banks, which have no target network.
pub fn toy_hash(out_dim: usize) -> u64 {
    fnv1a64(format!("toy:{out_dim}").as_bytes())
}

/// Identity used for generator-parameter checkpoints stored in the same
/// container (z dim 0, single member).
pub fn phi_hash(descriptor: &str) -> u64 {
    fnv1a64(format!("phi:{descriptor}").as_bytes())
}

/// An ordered set of generated weight vectors with their latent codes.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightBank {
    zs: Vec<Tensor>,
    thetas: Vec<WeightVector>,
    pub arch_hash: u64,
    /// Whether the stored θ have been gauge-fixed (in-memory provenance;
    /// not serialized — banks are written as generated).
    pub gauge_fixed: bool,
    /// Seed used during generation (in-memory provenance; not serialized).
    pub seed: u64,
}

impl WeightBank {
    pub fn new(
        zs: Vec<Tensor>,
        thetas: Vec<WeightVector>,
        arch_hash: u64,
        gauge_fixed: bool,
        seed: u64,
    ) -> Result<WeightBank> {
        if zs.is_empty() || zs.len() != thetas.len() {
            return Err(Error::Bank(format!(
                "bank needs ≥ 1 member and matching z/θ counts, got {} z and {} θ",
                zs.len(),
                thetas.len()
            )));
        }
        let zd = zs[0].numel();
        let td = thetas[0].len();
        for (i, z) in zs.iter().enumerate() {
            if z.numel() != zd {
                return Err(Error::Bank(format!("member {i}: z has {} coordinates, expected {zd}", z.numel())));
            }
        }
        for (i, t) in thetas.iter().enumerate() {
            if t.len() != td {
                return Err(Error::Bank(format!("member {i}: θ has {} coordinates, expected {td}", t.len())));
            }
        }
        if td == 0 {
            return Err(Error::Bank("θ vectors must be non-empty".into()));
        }
        Ok(WeightBank { zs, thetas, arch_hash, gauge_fixed, seed })
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the constructor enforces ≥ 1 member
    }

    pub fn z_dim(&self) -> usize {
        self.zs[0].numel()
    }

    pub fn theta_len(&self) -> usize {
        self.thetas[0].len()
    }

    pub fn zs(&self) -> &[Tensor] {
        &self.zs
    }

    pub fn thetas(&self) -> &[WeightVector] {
        &self.thetas
    }

    pub fn member(&self, i: usize) -> (&Tensor, &WeightVector) {
        (&self.zs[i], &self.thetas[i])
    }
}

fn push_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize a bank into container bytes.
pub fn bank_bytes(bank: &WeightBank) -> Result<Vec<u8>> {
    let count = u32::try_from(bank.len()).map_err(|_| Error::Bank("too many members".into()))?;
    let zd = u32::try_from(bank.z_dim()).map_err(|_| Error::Bank("z dimension too large".into()))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + bank.len() * 8 * (bank.z_dim() + bank.theta_len()) + 4);
    buf.extend_from_slice(&BANK_MAGIC);
    buf.extend_from_slice(&BANK_VERSION.to_le_bytes());
    buf.extend_from_slice(&bank.arch_hash.to_le_bytes());
    buf.extend_from_slice(&zd.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    for i in 0..bank.len() {
        let (z, t) = bank.member(i);
        push_f64s(&mut buf, z.data());
        push_f64s(&mut buf, t.flat.data());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

/// Parse container bytes back into a bank. Loaded banks carry default
/// provenance (`gauge_fixed = false`, `seed = 0`).
pub fn bank_from_bytes(bytes: &[u8]) -> Result<WeightBank> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::Bank(format!("file too short: {} bytes", bytes.len())));
    }
    if bytes[..4] != BANK_MAGIC {
        return Err(Error::Bank(format!("bad magic {:02x?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != BANK_VERSION {
        return Err(Error::Bank(format!("unsupported version {version}")));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(tail.try_into().unwrap());
    let crc = crc32fast::hash(body);
    if crc != stored_crc {
        return Err(Error::Bank(format!("CRC mismatch: computed {crc:#010x}, stored {stored_crc:#010x}")));
    }
    let arch_hash = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
    let zd = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[18..22].try_into().unwrap()) as usize;
    if count == 0 {
        return Err(Error::Bank("member count is zero".into()));
    }
    let payload = &body[HEADER_LEN..];
    if payload.len() % count != 0 {
        return Err(Error::Bank(format!(
            "payload of {} bytes does not divide into {count} members",
            payload.len()
        )));
    }
    let per = payload.len() / count;
    if per % 8 != 0 || per / 8 <= zd {
        return Err(Error::Bank(format!(
            "member span of {per} bytes inconsistent with z dimension {zd}"
        )));
    }
    let td = per / 8 - zd;
    let mut zs = Vec::with_capacity(count);
    let mut thetas = Vec::with_capacity(count);
    for m in 0..count {
        let at = m * per;
        let mut vals = Vec::with_capacity(zd + td);
        for i in 0..zd + td {
            let o = at + i * 8;
            vals.push(f64::from_le_bytes(payload[o..o + 8].try_into().unwrap()));
        }
        let theta = vals.split_off(zd);
        zs.push(Tensor::new(vec![zd], vals)?);
        thetas.push(WeightVector::new(Tensor::new(vec![td], theta)?));
    }
    WeightBank::new(zs, thetas, arch_hash, false, 0)
}

pub fn save_bank(path: &Path, bank: &WeightBank) -> Result<()> {
    write_atomic(path, &bank_bytes(bank)?)
}

pub fn load_bank(path: &Path) -> Result<WeightBank> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    bank_from_bytes(&bytes)
}

/// Check a loaded bank against the architecture it is about to be used with.
pub fn check_arch(bank: &WeightBank, arch: &ArchDescriptor) -> Result<()> {
    let want = arch_hash(arch);
    if bank.arch_hash != want {
        return Err(Error::Bank(format!(
            "arch hash mismatch: bank {:#018x}, experiment {want:#018x}",
            bank.arch_hash
        )));
    }
    let total = arch.layout()?.total;
    if bank.theta_len() != total {
        return Err(Error::Bank(format!(
            "θ length {} does not match architecture weight count {total}",
            bank.theta_len()
        )));
    }
    Ok(())
}
