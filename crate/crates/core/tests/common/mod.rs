//! Helpers shared by the integration tests: the finite-difference gradient
//! harness, a tiny pipeline config and CSV comparison with wall-clock
//! columns masked.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use flowprobe_core::harness::{
    cmd_ablations, cmd_build_all, cmd_mech_sweep, cmd_replacement, cmd_report, ExperimentConfig,
};
use flowprobe_core::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub enum Activation {
    Tanh,
    Silu,
}

#[derive(Debug, Clone, Copy)]
pub enum Loss {
    Mse,
    CrossEntropy,
    SumOfSquares,
}

/// A randomly shaped MLP together with its inputs and targets.
#[derive(Debug, Clone)]
pub struct MlpCase {
    pub batch: usize,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub loss: Loss,
    pub residual_scale: Option<f64>,
    pub input: Tensor,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub target: Tensor,
    pub labels: Vec<usize>,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

impl MlpCase {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = rng.gen_range(1..=4);
        let depth = rng.gen_range(1..=3);
        let widths: Vec<usize> = (0..=depth).map(|_| rng.gen_range(1..=6)).collect();
        let activation = if rng.gen_bool(0.5) { Activation::Tanh } else { Activation::Silu };
        let loss = match rng.gen_range(0..3) {
            0 => Loss::Mse,
            1 => Loss::CrossEntropy,
            _ => Loss::SumOfSquares,
        };
        let residual_scale = rng.gen_bool(0.4).then(|| rng.gen_range(-1.5..1.5));
        let input = random_tensor(&mut rng, &[batch, widths[0]], 1.0);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in widths.windows(2) {
            weights.push(random_tensor(&mut rng, &[w[0], w[1]], 1.0 / (w[0] as f64).sqrt()));
            biases.push(random_tensor(&mut rng, &[1, w[1]], 0.5));
        }
        let out = *widths.last().unwrap();
        let target = random_tensor(&mut rng, &[batch, out], 1.0);
        let labels = (0..batch).map(|_| rng.gen_range(0..out)).collect();
        Self {
            batch,
            widths,
            activation,
            loss,
            residual_scale,
            input,
            weights,
            biases,
            target,
            labels,
        }
    }

    /// Every differentiable leaf, in a fixed order: input, then (weight, bias) per layer.
    pub fn leaves(&self) -> Vec<Tensor> {
        let mut v = vec![self.input.clone()];
        for (w, b) in self.weights.iter().zip(&self.biases) {
            v.push(w.clone());
            v.push(b.clone());
        }
        v
    }

    /// Builds the loss on a fresh tape from the given leaf values.
    fn tape(&self, leaves: &[Tensor]) -> (Graph, Var, Vec<Var>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.watch(t.clone())).collect();
        let mut h = vars[0];
        let layers = self.weights.len();
        for l in 0..layers {
            let z = g.matmul(h, vars[1 + 2 * l]).unwrap();
            let z = g.add_bias(z, vars[2 + 2 * l]).unwrap();
            let last = l + 1 == layers;
            let mut a = if last {
                z
            } else {
                match self.activation {
                    Activation::Tanh => g.tanh(z),
                    Activation::Silu => g.silu(z),
                }
            };
            if let (Some(k), false) = (self.residual_scale, last) {
                if self.widths[l] == self.widths[l + 1] {
                    let skip = g.scale(h, k);
                    a = g.add(a, skip).unwrap();
                } else {
                    // Width changes: mix the layer input back in through a fixed projection.
                    let both = g.concat(&[a, h]).unwrap();
                    let rows = self.widths[l] + self.widths[l + 1];
                    let proj = Tensor::full(&[rows, self.widths[l + 1]], k / rows as f64);
                    let proj = g.constant(proj);
                    let mixed = g.matmul(both, proj).unwrap();
                    a = g.sub(a, mixed).unwrap();
                }
            }
            h = a;
        }
        let loss = match self.loss {
            Loss::Mse => {
                let t = g.constant(self.target.clone());
                g.mse(h, t).unwrap()
            }
            Loss::CrossEntropy => g.softmax_cross_entropy(h, &self.labels).unwrap(),
            Loss::SumOfSquares => {
                let sq = g.mul(h, h).unwrap();
                g.sum(sq)
            }
        };
        (g, loss, vars)
    }

    fn loss_value(&self, leaves: &[Tensor]) -> f64 {
        let (g, loss, _) = self.tape(leaves);
        g.value(loss).data()[0]
    }

    /// Largest relative error between reverse-mode and central-difference
    /// gradients over every scalar of every leaf.
    pub fn max_relative_error(&self) -> f64 {
        const H: f64 = 1e-5;
        let leaves = self.leaves();
        let (g, loss, vars) = self.tape(&leaves);
        let analytic = g.grad_wrt(loss, &vars).unwrap();
        let mut worst: f64 = 0.0;
        for (li, leaf) in leaves.iter().enumerate() {
            let grad = analytic[li].clone().unwrap_or_else(|| Tensor::zeros(leaf.shape()));
            for k in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[k] += H;
                let mut minus = leaves.clone();
                minus[li].data_mut()[k] -= H;
                let numeric = (self.loss_value(&plus) - self.loss_value(&minus)) / (2.0 * H);
                let a = grad.data()[k];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
        worst
    }
}

/// A pipeline small enough to build and evaluate in a couple of seconds.
pub fn tiny_config(out_dir: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
out_dir = "{}"
threads = 1

[dataset]
n_identities = 3
train_samples = 2
heldout_samples = 1

[arch]
hidden = 32

[teacher]
epochs = 1

[adapter]
epochs = 1

[couplings]
n_pairs = 8
steps = 4

[reflow]
epochs = 1

[distill]
epochs = 1

[replacement]
diagnostic_identities = 2
distill_check_seeds = 2

[sweep]
identities = 2
steps_list = [1, 2, 3, 4, 6]

[ablations]
alphas = [0.25, 1.0]
"#,
        out_dir.display()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

/// Runs every command once. The step-sweep pattern may legitimately be
/// absent, so its outcome is returned rather than checked.
pub fn run_pipeline(cfg: &ExperimentConfig) -> flowprobe_core::Result<bool> {
    cmd_build_all(cfg, true)?;
    cmd_replacement(cfg)?;
    let sweep = cmd_mech_sweep(cfg)?;
    cmd_ablations(cfg)?;
    cmd_report(cfg)?;
    Ok(sweep.phenomenon_present())
}

fn csv_files(dir: &Path, out: &mut Vec<PathBuf>) {
    let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            csv_files(&p, out);
        } else if p.extension().is_some_and(|e| e == "csv") {
            out.push(p);
        }
    }
}

/// Every CSV under `dir`, keyed by relative path, with wall-clock columns
/// (any header containing "latency") blanked.
pub fn masked_csvs(dir: &Path) -> BTreeMap<String, String> {
    let mut files = Vec::new();
    csv_files(dir, &mut files);
    files
        .into_iter()
        .map(|p| {
            let rel = p.strip_prefix(dir).unwrap().display().to_string();
            let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(&p).unwrap();
            let mut rows = r.records().map(|x| x.unwrap());
            let mut text = String::new();
            let mut masked = Vec::new();
            if let Some(h) = rows.next() {
                masked = h.iter().map(|c| c.contains("latency")).collect();
                text.push_str(&h.iter().collect::<Vec<_>>().join(","));
                text.push('\n');
            }
            for row in rows {
                let cells: Vec<&str> = row
                    .iter()
                    .enumerate()
                    .map(|(i, c)| if masked.get(i) == Some(&true) { "<time>" } else { c })
                    .collect();
                text.push_str(&cells.join(","));
                text.push('\n');
            }
            (rel, text)
        })
        .collect()
}
