// SPDX-License-Identifier: MIT OR Apache-2.0

//! SHA-256 fingerprints of tensors and parameter sets.

use alloc::string::String;
use core::fmt::Write;

use sha2::{Digest, Sha256};

use crate::model::ModelParams;
use crate::numerics::Matrix;

/// Incremental hasher over named tensors.
#[derive(Default)]
pub struct Fingerprint(Sha256);

impl Fingerprint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
        self
    }

    pub fn f32s(&mut self, name: &str, m: &Matrix<f32>) -> &mut Self {
        self.bytes(name.as_bytes());
        self.0.update((m.rows() as u64).to_le_bytes());
        self.0.update((m.cols() as u64).to_le_bytes());
        for v in m.data() {
            self.0.update(v.to_le_bytes());
        }
        self
    }

    pub fn f64s(&mut self, name: &str, m: &Matrix<f64>) -> &mut Self {
        self.bytes(name.as_bytes());
        self.0.update((m.rows() as u64).to_le_bytes());
        self.0.update((m.cols() as u64).to_le_bytes());
        for v in m.data() {
            self.0.update(v.to_le_bytes());
        }
        self
    }

    pub fn hex(&self) -> String {
        let digest = self.0.clone().finalize();
        let mut s = String::with_capacity(64);
        for b in digest.iter() {
            let _ = write!(s, "{b:02x}");
        }
        s
    }
}

/// Hash of every tensor of `params`, in checkpoint order.
pub fn params_hash(params: &ModelParams) -> String {
    let mut f = Fingerprint::new();
    for (name, m) in params.named_tensors() {
        f.f32s(&name, m);
    }
    f.hex()
}

pub fn matrix_hash(m: &Matrix<f64>) -> String {
    Fingerprint::new().f64s("", m).hex()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest_and_framing() {
        assert_eq!(
            Fingerprint::new().hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        let ab = Fingerprint::new().bytes(b"ab").bytes(b"c").hex();
        let a_bc = Fingerprint::new().bytes(b"a").bytes(b"bc").hex();
        assert_ne!(ab, a_bc);
    }

    #[test]
    fn shape_and_values_matter() {
        let m = Matrix::from_vec(2, 2, alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let flat = Matrix::from_vec(1, 4, alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matrix_hash(&m), matrix_hash(&m.clone()));
        assert_ne!(matrix_hash(&m), matrix_hash(&flat));
        let mut z = m.clone();
        z.set(0, 0, -0.0);
        let mut z2 = m.clone();
        z2.set(0, 0, 0.0);
        assert_ne!(matrix_hash(&z), matrix_hash(&z2));
    }
}
