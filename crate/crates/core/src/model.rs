//! Network description and the versioned binary model file.
//!
//! Layout (all integers and floats little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 6 | magic `DGCRF1` |
//! | 4 | version (`u32`, currently 1) |
//! | 12 | `d`, `K`, `T` (`u32` each) |
//! | 4 | flags (`u8` each): share_bank, share_bias, cascade, softmax variant (0 exp, 1 plain) |
//! | 8·T | β multipliers (`f64`) |
//! | … | banks: 1 if share_bank else T; each is K factors `P_k`, K factors `R_k` (dense `d² x d²`, row-major, upper triangle zero) then K biases |
//! | 8·K·(T−1) | per-layer biases for layers 2..T, present only when share_bank is set and share_bias is not |
//!
//! The file stores triangular factors rather than `W_k`/`Ψ_k`, so loaded
//! matrices are PSD by construction.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, ModelError, Result};
use crate::inference::HqsSchedule;
use crate::pgnet::{is_lower_triangular, PotentialBank, SoftmaxVariant};

pub const MAGIC: &[u8; 6] = b"DGCRF1";
pub const VERSION: u32 = 1;
/// Bytes before the first `f64` of the payload.
pub const HEADER_LEN: usize = 6 + 4 + 12 + 4;

/// Fixed architecture of a deep GCRF network.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub d: usize,
    pub k: usize,
    pub schedule: HqsSchedule,
    /// Run a fresh PgNet on `Y^t` before every HQS layer.
    pub cascade: bool,
    /// One bank for all PgNets; otherwise one bank per layer.
    pub share_bank: bool,
    /// With a shared bank, also share `b_k` across layers.
    pub share_bias: bool,
    pub softmax: SoftmaxVariant,
}

impl Architecture {
    pub fn new(d: usize, k: usize, schedule: HqsSchedule) -> Self {
        Architecture {
            d,
            k,
            schedule,
            cascade: true,
            share_bank: true,
            share_bias: true,
            softmax: SoftmaxVariant::Exponential,
        }
    }

    pub fn layers(&self) -> usize {
        self.schedule.len()
    }

    pub fn num_banks(&self) -> usize {
        if self.share_bank {
            1
        } else {
            self.layers().max(1)
        }
    }

    /// Number of PgNet evaluations in a forward pass.
    pub fn num_pgnets(&self) -> usize {
        match (self.layers(), self.cascade) {
            (0, _) => 0,
            (t, true) => t,
            (_, false) => 1,
        }
    }

    /// Extra per-layer bias vectors stored beside a shared bank.
    pub fn num_layer_biases(&self) -> usize {
        if self.share_bank && !self.share_bias {
            self.layers().saturating_sub(1)
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.k == 0 {
            return Err(Error::Param(format!(
                "need d >= 2 and K >= 1, got d = {}, K = {}",
                self.d, self.k
            )));
        }
        self.schedule.validate()?;
        if !self.share_bank && self.share_bias {
            return Err(Error::Param(
                "share_bias requires share_bank; unshared banks carry their own biases".into(),
            ));
        }
        if !self.cascade && !(self.share_bank && self.share_bias) {
            return Err(Error::Param(
                "without cascade only one PgNet runs; bank and bias sharing must be on".into(),
            ));
        }
        Ok(())
    }

    /// Number of `f64` values in the payload.
    pub fn payload_len(&self) -> usize {
        let n = self.d * self.d;
        let bank = 2 * self.k * n * n + self.k;
        self.layers() + self.num_banks() * bank + self.num_layer_biases() * self.k
    }

    pub fn file_len(&self) -> usize {
        HEADER_LEN + 8 * self.payload_len()
    }
}

/// Architecture plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DgcrfModel {
    pub arch: Architecture,
    pub banks: Vec<PotentialBank>,
    /// Biases for layers `2..=T` when `share_bias` is off under a shared bank.
    pub layer_biases: Vec<Vec<f64>>,
}

impl DgcrfModel {
    /// Model whose every bank (and every per-layer bias set) is a copy of `bank`.
    pub fn from_bank(arch: Architecture, bank: PotentialBank) -> Result<Self> {
        let model = DgcrfModel {
            banks: vec![bank.clone(); arch.num_banks()],
            layer_biases: vec![bank.biases.clone(); arch.num_layer_biases()],
            arch,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.banks.len() != self.arch.num_banks() {
            return Err(Error::Contract(format!(
                "model has {} banks, architecture needs {}",
                self.banks.len(),
                self.arch.num_banks()
            )));
        }
        for bank in &self.banks {
            bank.validate()?;
            if bank.d != self.arch.d || bank.k() != self.arch.k {
                return Err(Error::Contract(format!(
                    "bank is d = {}, K = {}; architecture is d = {}, K = {}",
                    bank.d,
                    bank.k(),
                    self.arch.d,
                    self.arch.k
                )));
            }
        }
        if self.layer_biases.len() != self.arch.num_layer_biases()
            || self.layer_biases.iter().any(|b| b.len() != self.arch.k)
        {
            return Err(Error::Contract("per-layer bias sets do not match the architecture".into()));
        }
        if self.layer_biases.iter().flatten().any(|b| !b.is_finite()) {
            return Err(Error::Numeric("non-finite per-layer bias".into()));
        }
        Ok(())
    }

    /// Bank used by the PgNet feeding layer `t`.
    pub fn bank_index(&self, t: usize) -> usize {
        if self.arch.share_bank {
            0
        } else {
            t
        }
    }

    pub fn bank_for_layer(&self, t: usize) -> &PotentialBank {
        &self.banks[self.bank_index(t)]
    }

    pub fn biases_for_layer(&self, t: usize) -> &[f64] {
        if t > 0 && self.arch.num_layer_biases() > 0 {
            &self.layer_biases[t - 1]
        } else {
            &self.bank_for_layer(t).biases
        }
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Param(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_matrix(buf: &mut Vec<u8>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            buf.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
}

pub fn encode_model(model: &DgcrfModel) -> Result<Vec<u8>> {
    for (b, bank) in model.banks.iter().enumerate() {
        for (name, set) in [("P", &bank.factors_w), ("R", &bank.factors_psi)] {
            for (k, f) in set.iter().enumerate() {
                if !is_lower_triangular(f) {
                    return Err(Error::Contract(format!(
                        "bank {b}: factor {name}_{k} has a nonzero strict upper triangle"
                    )));
                }
            }
        }
    }
    model.validate()?;
    let arch = &model.arch;
    let mut buf = Vec::with_capacity(arch.file_len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut buf, arch.d)?;
    put_u32(&mut buf, arch.k)?;
    put_u32(&mut buf, arch.layers())?;
    buf.push(arch.share_bank as u8);
    buf.push(arch.share_bias as u8);
    buf.push(arch.cascade as u8);
    buf.push(match arch.softmax {
        SoftmaxVariant::Exponential => 0,
        SoftmaxVariant::Plain => 1,
    });
    for m in arch.schedule.multipliers() {
        buf.extend_from_slice(&m.to_le_bytes());
    }
    for bank in &model.banks {
        bank.factors_w.iter().for_each(|f| put_matrix(&mut buf, f));
        bank.factors_psi.iter().for_each(|f| put_matrix(&mut buf, f));
        bank.biases.iter().for_each(|b| buf.extend_from_slice(&b.to_le_bytes()));
    }
    for set in &model.layer_biases {
        set.iter().for_each(|b| buf.extend_from_slice(&b.to_le_bytes()));
    }
    debug_assert_eq!(buf.len(), arch.file_len());
    Ok(buf)
}

pub fn save_model(model: &DgcrfModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn flag(byte: u8, name: &str) -> std::result::Result<bool, ModelError> {
    match byte {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(ModelError::Header(format!("{name} flag must be 0 or 1, got {v}"))),
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<DgcrfModel> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ModelError::BadMagic.into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(ModelError::SizeMismatch {
            expected: HEADER_LEN,
            found: bytes.len(),
        }
        .into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(6);
    if version != VERSION {
        return Err(ModelError::VersionMismatch {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let (d, k, t) = (u32_at(10) as usize, u32_at(14) as usize, u32_at(18) as usize);
    if d < 2 || d > 64 || k == 0 || k > 100_000 || t > 10_000 {
        return Err(ModelError::Header(format!("implausible sizes d = {d}, K = {k}, T = {t}")).into());
    }
    let share_bank = flag(bytes[22], "share_bank")?;
    let share_bias = flag(bytes[23], "share_bias")?;
    let cascade = flag(bytes[24], "cascade")?;
    let softmax = match bytes[25] {
        0 => SoftmaxVariant::Exponential,
        1 => SoftmaxVariant::Plain,
        v => return Err(ModelError::Header(format!("unknown softmax variant {v}")).into()),
    };
    // the schedule is filled in below once the multipliers are read
    let mut arch = Architecture {
        d,
        k,
        schedule: HqsSchedule::new_unchecked(vec![1.0; t]),
        cascade,
        share_bank,
        share_bias,
        softmax,
    };
    let expected = arch.file_len();
    if bytes.len() != expected {
        return Err(ModelError::SizeMismatch {
            expected,
            found: bytes.len(),
        }
        .into());
    }
    let mut values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut payload: Vec<f64> = Vec::with_capacity(arch.payload_len());
    payload.extend(&mut values);
    if let Some(i) = payload.iter().position(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite(i).into());
    }
    let mut cursor = payload.into_iter();
    let mut take = |count: usize| -> Vec<f64> { cursor.by_ref().take(count).collect() };
    arch.schedule = HqsSchedule::new(take(t)).map_err(|e| ModelError::Header(e.to_string()))?;

    let n = d * d;
    let mut banks = Vec::with_capacity(arch.num_banks());
    for b in 0..arch.num_banks() {
        let mut read_factors = |name: &str| -> std::result::Result<Vec<DMatrix<f64>>, ModelError> {
            (0..k)
                .map(|kk| {
                    let m = DMatrix::from_row_slice(n, n, &take(n * n));
                    if is_lower_triangular(&m) {
                        Ok(m)
                    } else {
                        Err(ModelError::UpperTriangle(format!("bank {b} {name}_{kk}")))
                    }
                })
                .collect()
        };
        let factors_w = read_factors("P")?;
        let factors_psi = read_factors("R")?;
        let biases = take(k);
        banks.push(PotentialBank {
            d,
            factors_w,
            factors_psi,
            biases,
        });
    }
    let layer_biases = (0..arch.num_layer_biases()).map(|_| take(k)).collect();
    let model = DgcrfModel {
        arch,
        banks,
        layer_biases,
    };
    model.validate().map_err(|e| match e {
        Error::Model(m) => Error::Model(m),
        other => Error::Model(ModelError::Header(other.to_string())),
    })?;
    Ok(model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DgcrfModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pgnet::tests::random_bank;

    fn sample(share_bank: bool, share_bias: bool) -> DgcrfModel {
        let mut arch = Architecture::new(2, 3, HqsSchedule::standard().truncated(3));
        arch.share_bank = share_bank;
        arch.share_bias = share_bias;
        let banks = (0..arch.num_banks()).map(|i| random_bank(2, 3, 40 + i as u64)).collect();
        let layer_biases = (0..arch.num_layer_biases())
            .map(|i| vec![0.1 * i as f64, -0.2, 0.3])
            .collect();
        DgcrfModel {
            arch,
            banks,
            layer_biases,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for (sb, sbias) in [(true, true), (true, false), (false, false)] {
            let m = sample(sb, sbias);
            let bytes = encode_model(&m).unwrap();
            assert_eq!(bytes.len(), HEADER_LEN + 8 * m.arch.payload_len());
            let back = decode_model(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(encode_model(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn file_size_arithmetic() {
        let m = sample(true, true);
        // T betas + one bank of 2·K·n² factors + K biases
        let payload = 3 + 2 * 3 * 16 + 3;
        assert_eq!(encode_model(&m).unwrap().len(), 26 + 8 * payload);
    }

    #[test]
    fn upper_triangle_refused_on_save() {
        let mut m = sample(true, true);
        m.banks[0].factors_psi[1][(0, 2)] = 1e-3;
        assert!(matches!(encode_model(&m), Err(Error::Contract(_))));
    }

    #[test]
    fn load_errors_are_distinct() {
        let m = sample(true, true);
        let good = encode_model(&m).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::Model(ModelError::BadMagic))));
        assert!(decode_model(&bad).unwrap_err().to_string().contains("bad magic"));

        let mut bad = good.clone();
        bad[6] = 9;
        assert!(matches!(decode_model(&bad), Err(Error::Model(ModelError::VersionMismatch { .. }))));

        let bad = &good[..good.len() - 5];
        let err = decode_model(bad).unwrap_err();
        assert!(matches!(err, Error::Model(ModelError::SizeMismatch { .. })));
        assert!(err.to_string().contains("size mismatch"));

        let mut bad = good.clone();
        let off = HEADER_LEN + 8 * 4;
        bad[off..off + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        let err = decode_model(&bad).unwrap_err();
        assert!(matches!(err, Error::Model(ModelError::NonFinite(_))));
        assert!(err.to_string().contains("non-finite parameter"));

        let mut bad = good.clone();
        // first P factor, row 0 col 1
        let off = HEADER_LEN + 8 * (3 + 1);
        bad[off..off + 8].copy_from_slice(&0.5f64.to_le_bytes());
        assert!(matches!(decode_model(&bad), Err(Error::Model(ModelError::UpperTriangle(_)))));
    }

    #[test]
    fn layer_views() {
        let m = sample(true, false);
        assert_eq!(m.biases_for_layer(0), m.banks[0].biases.as_slice());
        assert_eq!(m.biases_for_layer(2), m.layer_biases[1].as_slice());
        let m = sample(false, false);
        assert_eq!(m.bank_index(2), 2);
        assert_eq!(m.biases_for_layer(1), m.banks[1].biases.as_slice());
    }

    #[test]
    fn inconsistent_flags_rejected() {
        let mut arch = Architecture::new(2, 2, HqsSchedule::standard().truncated(2));
        arch.share_bank = false;
        assert!(arch.validate().is_err());
        arch.share_bias = false;
        arch.validate().unwrap();
        arch.cascade = false;
        assert!(arch.validate().is_err());
    }
}
