//! Width and dimension-usage reports over finalized gates.

use std::path::{Path, PathBuf};

use crate::budget::{count_params_exact, total_params};
use crate::error::Result;
use crate::model::{validate_gates, BlockGates, GateSlot, ModelSpec};

/// Slots that select coordinates of the embedding dimension.
const EMBED_SLOTS: [GateSlot; 4] = [GateSlot::AttnIn, GateSlot::AttnOut, GateSlot::MlpIn, GateSlot::MlpOut];

#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureReport {
    /// Kept width of s1..s5 for every block.
    pub widths: Vec<[usize; 5]>,
    /// Fraction of (block, embedding-slot) pairs keeping each coordinate.
    pub dim_preservation: Vec<f64>,
    pub t: u64,
    pub t_total: u64,
}

impl ArchitectureReport {
    pub fn new(spec: &ModelSpec, gates: &[BlockGates]) -> Result<Self> {
        validate_gates(spec, gates)?;
        let widths = gates
            .iter()
            .map(|b| GateSlot::ALL.map(|s| b.get(s).nnz()))
            .collect();
        let denom = (EMBED_SLOTS.len() * spec.n_layers) as f64;
        let dim_preservation = (0..spec.d)
            .map(|j| {
                let kept = gates
                    .iter()
                    .flat_map(|b| EMBED_SLOTS.iter().map(move |&s| b.get(s).get(j)))
                    .filter(|&on| on)
                    .count();
                kept as f64 / denom
            })
            .collect();
        Ok(ArchitectureReport {
            widths,
            dim_preservation,
            t: count_params_exact(spec, gates),
            t_total: total_params(spec),
        })
    }

    pub fn ratio(&self) -> f64 {
        self.t as f64 / self.t_total as f64
    }

    pub fn mean_preservation(&self) -> f64 {
        self.dim_preservation.iter().sum::<f64>() / self.dim_preservation.len() as f64
    }

    pub fn widths_csv(&self) -> String {
        let mut out = String::from("block,s1,s2,s3,s4,s5\n");
        for (l, w) in self.widths.iter().enumerate() {
            out.push_str(&format!("{l},{},{},{},{},{}\n", w[0], w[1], w[2], w[3], w[4]));
        }
        out
    }

    pub fn dim_preservation_csv(&self) -> String {
        let mut out = String::from("dim,preserved\n");
        for (j, p) in self.dim_preservation.iter().enumerate() {
            out.push_str(&format!("{j},{p}\n"));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        format!(
            "achieved_ratio,t,t_total,mean_dim_preservation\n{},{},{},{}\n",
            self.ratio(),
            self.t,
            self.t_total,
            self.mean_preservation()
        )
    }

    /// Writes widths.csv, dim_preservation.csv and summary.csv into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let files = [
            ("widths.csv", self.widths_csv()),
            ("dim_preservation.csv", self.dim_preservation_csv()),
            ("summary.csv", self.summary_csv()),
        ];
        let mut paths = Vec::new();
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body)?;
            paths.push(path);
        }
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::GateVector;

    fn spec() -> ModelSpec {
        ModelSpec {
            d: 6,
            n_layers: 3,
            n_heads: 2,
            d_mid: 10,
            vocab_size: 7,
            max_seq_len: 4,
            ..ModelSpec::tiny()
        }
    }

    #[test]
    fn all_ones_is_identity() {
        let s = spec();
        let r = ArchitectureReport::new(&s, &vec![BlockGates::ones(&s); 3]).unwrap();
        assert!(r.widths.iter().all(|w| *w == [6, 6, 6, 10, 6]));
        assert!(r.dim_preservation.iter().all(|&p| p == 1.0));
        assert_eq!(r.ratio(), 1.0);
        assert_eq!(r.widths_csv().lines().count(), 1 + 3);
        assert_eq!(r.dim_preservation_csv().lines().count(), 1 + 6);
    }

    #[test]
    fn pruned_block_row_reads_zero() {
        let s = spec();
        let mut gates = vec![BlockGates::ones(&s); 3];
        gates[1] = BlockGates {
            gates: s.gate_dims().map(GateVector::zeros),
        };
        let r = ArchitectureReport::new(&s, &gates).unwrap();
        assert_eq!(r.widths[1], [0; 5]);
        assert_eq!(r.widths[0], [6, 6, 6, 10, 6]);
        assert!(r.dim_preservation.iter().all(|&p| (p - 2.0 / 3.0).abs() < 1e-15));
        assert!(r.widths_csv().contains("\n1,0,0,0,0,0\n"));
    }

    #[test]
    fn preservation_counts_embedding_slots_only() {
        let s = spec();
        let mut gates = vec![BlockGates::ones(&s); 3];
        *gates[0].get_mut(GateSlot::MlpMid) = GateVector::zeros(10);
        gates[2].get_mut(GateSlot::AttnIn).set(4, false);
        let r = ArchitectureReport::new(&s, &gates).unwrap();
        assert_eq!(r.dim_preservation[4], 11.0 / 12.0);
        assert_eq!(r.dim_preservation[0], 1.0);
    }

    #[test]
    fn write_is_byte_stable() {
        let s = spec();
        let dir = tempfile::tempdir().unwrap();
        let mut gates = vec![BlockGates::ones(&s); 3];
        gates[0].get_mut(GateSlot::MlpOut).set(2, false);
        let r = ArchitectureReport::new(&s, &gates).unwrap();
        let paths = r.write(dir.path()).unwrap();
        let first: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
        ArchitectureReport::new(&s, &gates).unwrap().write(dir.path()).unwrap();
        let second: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
    }
}
