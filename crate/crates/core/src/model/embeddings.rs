use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use super::ModelError;
use crate::corpus::{CorpusError, Vocab};
use crate::numcore::{Real, Tensor};

/// Builds a `[V, dim]` embedding table from a whitespace-separated text file
/// of `token v1 .. vdim` lines. Tokens absent from the file get the mean of the
/// loaded vectors plus uniform noise in ±0.01. Returns the table and the number
/// of vocabulary entries found in the file.
pub fn load_word_vectors<F: Real, R: Rng + ?Sized>(
    path: &Path,
    vocab: &Vocab,
    dim: usize,
    rng: &mut R,
) -> Result<(Tensor<F>, usize), ModelError> {
    let io = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut found: HashMap<usize, Vec<f64>> = HashMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let Some(id) = vocab.get(token) else { continue };
        let vec: Vec<f64> = parts
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| ModelError::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if vec.len() != dim {
            return Err(ModelError::Config(format!("{}:{}: expected {dim} values, got {}", path.display(), n + 1, vec.len())));
        }
        found.entry(id).or_insert(vec);
    }
    let mut mean = vec![0.0; dim];
    for v in found.values() {
        mean.iter_mut().zip(v).for_each(|(m, x)| *m += x / found.len() as f64);
    }
    let mut data = Vec::with_capacity(vocab.len() * dim);
    for id in 0..vocab.len() {
        match found.get(&id) {
            Some(v) => data.extend(v.iter().map(|&x| F::of(x))),
            None => data.extend(mean.iter().map(|&m| F::of(m + rng.gen_range(-0.01..=0.01)))),
        }
    }
    Ok((Tensor::new(vec![vocab.len(), dim], data)?, found.len()))
}

impl<F: Real> super::Fsdm<F> {
    /// Replaces the embedding table.
    pub fn set_embedding(&mut self, table: Tensor<F>) -> Result<(), ModelError> {
        let current = self.params.get(self.ids.embedding);
        if table.shape() != current.shape() {
            return Err(ModelError::Mismatch(format!("embedding shape {:?} vs {:?}", table.shape(), current.shape())));
        }
        *self.params.get_mut(self.ids.embedding) = table;
        Ok(())
    }
}
