//! The 2D toy inverse problem: `x = G u` with `u ~ U(-1, 1)^2`, measured as
//! `y = A x + noise`.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const BLOB_MAGIC: &[u8; 8] = b"CFTOY\x00\x00\x01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyProblem {
    pub gen_matrix: [[f64; 2]; 2],
    pub mix_matrix: [[f64; 2]; 2],
    pub sigma_n: f64,
    pub ood_shift: [f64; 2],
    pub n_samples: usize,
}

impl Default for ToyProblem {
    fn default() -> Self {
        let r3 = 3.0_f64.sqrt();
        Self {
            gen_matrix: [[r3 / 4.0, -0.1], [0.25, -r3 / 10.0]],
            mix_matrix: [[0.7, 0.3], [0.3, 0.7]],
            sigma_n: 0.01,
            ood_shift: [0.8, -0.8],
            n_samples: 100_000,
        }
    }
}

fn apply(m: &[[f64; 2]; 2], v: [f64; 2]) -> [f64; 2] {
    [
        m[0][0] * v[0] + m[0][1] * v[1],
        m[1][0] * v[0] + m[1][1] * v[1],
    ]
}

/// Paired samples, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor<f64>,
    pub y: Tensor<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x1,x2,y1,y2\n");
        for i in 0..self.len() {
            let (x, y) = (self.x.row_slice(i), self.y.row_slice(i));
            out.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e}\n",
                x[0], x[1], y[0], y[1]
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("x1,x2,y1,y2") {
            return Err(Error::Dataset("expected header x1,x2,y1,y2".into()));
        }
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Dataset(format!("line {}: {e}", i + 2)))?;
            if vals.len() != 4 {
                return Err(Error::Dataset(format!(
                    "line {}: expected 4 columns, got {}",
                    i + 2,
                    vals.len()
                )));
            }
            xs.extend_from_slice(&vals[..2]);
            ys.extend_from_slice(&vals[2..]);
        }
        let n = xs.len() / 2;
        Ok(Self {
            x: Tensor::new(n, 2, xs)?,
            y: Tensor::new(n, 2, ys)?,
        })
    }

    /// Little-endian `f64` rows `x1,x2,y1,y2` behind a magic header and a
    /// sample count, followed by the SHA-256 of everything before it.
    pub fn write_blob(&self, mut w: impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 32 * self.len() + 32);
        buf.extend_from_slice(BLOB_MAGIC);
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for i in 0..self.len() {
            for v in self.x.row_slice(i).iter().chain(self.y.row_slice(i)) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_blob(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() < 48 || &buf[..8] != BLOB_MAGIC {
            return Err(Error::Dataset("not a dataset blob".into()));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Dataset("blob checksum mismatch".into()));
        }
        let n = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        let payload = &body[16..];
        if payload.len() != n * 32 {
            return Err(Error::Dataset(format!(
                "blob declares {n} samples but holds {} bytes",
                payload.len()
            )));
        }
        let (mut xs, mut ys) = (Vec::with_capacity(2 * n), Vec::with_capacity(2 * n));
        for (k, chunk) in payload.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            if k % 4 < 2 {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
        Ok(Self {
            x: Tensor::new(n, 2, xs)?,
            y: Tensor::new(n, 2, ys)?,
        })
    }

    /// Rows `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        let pick = |t: &Tensor<f64>| {
            Tensor::new(len, 2, t.data()[2 * start..2 * (start + len)].to_vec()).expect("slice")
        };
        Self {
            x: pick(&self.x),
            y: pick(&self.y),
        }
    }
}

impl ToyProblem {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_n > 0.0) {
            return Err(Error::Config("sigma_n must be positive".into()));
        }
        Ok(())
    }

    pub fn signal(&self, u: [f64; 2]) -> [f64; 2] {
        apply(&self.gen_matrix, u)
    }

    /// Noise-free measurement `A x`.
    pub fn measure(&self, x: [f64; 2]) -> [f64; 2] {
        apply(&self.mix_matrix, x)
    }

    pub fn make_ood(&self, y: [f64; 2]) -> [f64; 2] {
        [y[0] + self.ood_shift[0], y[1] + self.ood_shift[1]]
    }

    /// Box containing every `x`: `|x_i| <= sum_j |G_ij|`.
    pub fn signal_bounds(&self) -> [f64; 2] {
        let g = &self.gen_matrix;
        [g[0][0].abs() + g[0][1].abs(), g[1][0].abs() + g[1][1].abs()]
    }

    /// Sample `i` of the stream for `seed`. Each sample has its own counter
    /// stream, so any subset can be regenerated independently.
    pub fn sample_pair(&self, seed: u64, i: u64, noisy: bool) -> ([f64; 2], [f64; 2]) {
        let mut r = rng::stream(seed, i);
        let u = [r.random_range(-1.0..=1.0), r.random_range(-1.0..=1.0)];
        let x = self.signal(u);
        let mut y = self.measure(x);
        if noisy {
            for v in &mut y {
                let e: f64 = r.sample(StandardNormal);
                *v += self.sigma_n * e;
            }
        }
        (x, y)
    }

    pub fn gen_training_pairs(&self, n: usize, seed: u64, noisy: bool) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        let (mut xs, mut ys) = (Vec::with_capacity(2 * n), Vec::with_capacity(2 * n));
        for i in 0..n {
            let (x, y) = self.sample_pair(seed, i as u64, noisy);
            xs.extend_from_slice(&x);
            ys.extend_from_slice(&y);
        }
        Ok(Dataset {
            x: Tensor::new(n, 2, xs)?,
            y: Tensor::new(n, 2, ys)?,
        })
    }

    /// Every row of `y` shifted out of distribution.
    pub fn make_ood_batch(&self, y: &Tensor<f64>) -> Tensor<f64> {
        let mut out = y.clone();
        for r in 0..out.rows() {
            let s = self.make_ood([y.get(r, 0), y.get(r, 1)]);
            out.row_slice_mut(r).copy_from_slice(&s);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signal_examples() {
        let p = ToyProblem::default();
        let r3 = 3.0_f64.sqrt();
        let x = p.signal([1.0, 1.0]);
        assert!((x[0] - (r3 / 4.0 - 0.1)).abs() < 1e-15);
        assert!((x[1] - (0.25 - r3 / 10.0)).abs() < 1e-15);
        assert!((x[0] - 0.3330).abs() < 1e-4 && (x[1] - 0.0768).abs() < 1e-4);
        assert_eq!(p.signal([0.0, 0.0]), [0.0, 0.0]);
        assert_eq!(p.measure([0.0, 0.0]), [0.0, 0.0]);
    }

    #[test]
    fn ood_shift() {
        let p = ToyProblem::default();
        assert_eq!(p.make_ood([0.0, 0.0]), [0.8, -0.8]);
        let y = [0.123, -0.456];
        let o = p.make_ood(y);
        assert!((o[0] - 0.8 - y[0]).abs() < 1e-15 && (o[1] + 0.8 - y[1]).abs() < 1e-15);
    }

    #[test]
    fn ood_mean_is_shifted_mean() {
        let p = ToyProblem::default();
        let d = p.gen_training_pairs(2000, 5, true).unwrap();
        let o = p.make_ood_batch(&d.y);
        for c in 0..2 {
            let m = (0..2000).map(|r| d.y.get(r, c)).sum::<f64>() / 2000.0;
            let mo = (0..2000).map(|r| o.get(r, c)).sum::<f64>() / 2000.0;
            assert!((mo - m - p.ood_shift[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn support_fills_the_box() {
        let p = ToyProblem::default();
        let d = p.gen_training_pairs(100_000, 1, true).unwrap();
        let b = p.signal_bounds();
        let mut extreme = [0.0_f64; 2];
        for r in 0..d.len() {
            for c in 0..2 {
                let v = d.x.get(r, c);
                assert!(v.abs() <= b[c] + 1e-12 && v.abs() <= 1.0);
                extreme[c] = extreme[c].max(v.abs());
            }
        }
        for c in 0..2 {
            assert!(b[c] - extreme[c] < 0.01, "{c}: {} vs {}", extreme[c], b[c]);
        }
    }

    #[test]
    fn noise_has_stated_scale() {
        let p = ToyProblem::default();
        let clean = p.gen_training_pairs(20_000, 9, false).unwrap();
        let noisy = p.gen_training_pairs(20_000, 9, true).unwrap();
        assert_eq!(clean.x, noisy.x);
        let d: Vec<f64> = clean.y.data().iter().zip(noisy.y.data()).map(|(a, b)| b - a).collect();
        let sd = (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt();
        assert!((sd - 0.01).abs() < 0.0005, "{sd}");
    }

    #[test]
    fn deterministic_and_prefix_stable() {
        let p = ToyProblem::default();
        let a = p.gen_training_pairs(300, 7, true).unwrap();
        assert_eq!(a, p.gen_training_pairs(300, 7, true).unwrap());
        assert_eq!(a.slice(0, 100), p.gen_training_pairs(100, 7, true).unwrap());
        assert_ne!(a, p.gen_training_pairs(300, 8, true).unwrap());
        assert!(p.gen_training_pairs(0, 7, true).is_err());
    }

    #[test]
    fn csv_and_blob_round_trip() {
        let p = ToyProblem::default();
        let d = p.gen_training_pairs(50, 3, true).unwrap();
        let csv = d.to_csv();
        assert!(csv.starts_with("x1,x2,y1,y2\n"));
        assert_eq!(Dataset::from_csv(&csv).unwrap(), d);

        let mut blob = Vec::new();
        d.write_blob(&mut blob).unwrap();
        assert_eq!(Dataset::read_blob(&blob[..]).unwrap(), d);
        blob[20] ^= 1;
        assert!(Dataset::read_blob(&blob[..]).is_err());
    }
}
