//! Binary dataset format (LNTK1), plain-text experiment configuration,
//! and CSV/JSON report writers.

use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    BlockShape, FeatureMap, Label, LinearizedDataset, LinearizedSample, LossKind,
};
use crate::optim::{InitScheme, TrainConfig};

pub const MAGIC: &[u8; 6] = b"LNTK1\n";

/// Header arithmetic: magic (6), flags (1), then 3 + 2T u64 fields.
fn header_len(t: usize) -> usize {
    MAGIC.len() + 1 + 8 * (3 + 2 * t)
}

fn sample_len(k: usize, loss: LossKind, block_entries: usize) -> usize {
    let label = match loss {
        LossKind::SquaredError => 8 * k,
        LossKind::CrossEntropy => 8,
    };
    8 * k + label + 8 * k * block_entries
}

/// Total file size implied by the header fields.
pub fn expected_file_len(n: usize, k: usize, shape: &BlockShape, loss: LossKind) -> usize {
    header_len(shape.num_blocks()) + n * sample_len(k, loss, shape.block_entries())
}

/// Serialize a dataset: header, then per sample f0 (K f64 LE), the
/// label (u64 class index or K f64 targets, by the loss flag), then the
/// K x sum(m_i n_i) feature entries in (coordinate, block, row-major)
/// order. All scalars little-endian.
pub fn write_dataset(path: &Path, data: &LinearizedDataset) -> Result<()> {
    let mut buf: Vec<u8> = Vec::with_capacity(expected_file_len(
        data.len(),
        data.output_dim(),
        data.shape(),
        data.loss(),
    ));
    buf.extend_from_slice(MAGIC);
    buf.push(match data.loss() {
        LossKind::SquaredError => 0,
        LossKind::CrossEntropy => 1,
    });
    let push_u64 = |buf: &mut Vec<u8>, x: usize| buf.extend_from_slice(&(x as u64).to_le_bytes());
    push_u64(&mut buf, data.len());
    push_u64(&mut buf, data.output_dim());
    push_u64(&mut buf, data.shape().num_blocks());
    for &(mi, ni) in data.shape().blocks() {
        push_u64(&mut buf, mi);
        push_u64(&mut buf, ni);
    }
    for s in data.samples() {
        for j in 0..data.output_dim() {
            buf.extend_from_slice(&s.base_output[j].to_le_bytes());
        }
        match (&s.label, data.loss()) {
            (Label::Class(c), LossKind::CrossEntropy) => push_u64(&mut buf, *c),
            (Label::Target(y), LossKind::SquaredError) => {
                for j in 0..data.output_dim() {
                    buf.extend_from_slice(&y[j].to_le_bytes());
                }
            }
            _ => return Err(Error::Format("label kind does not match loss flag".into())),
        }
        for j in 0..data.output_dim() {
            for block in s.features.coord_blocks(j) {
                for r in 0..block.nrows() {
                    for c in 0..block.ncols() {
                        buf.extend_from_slice(&block[(r, c)].to_le_bytes());
                    }
                }
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    total: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated { expected: self.total.max(self.pos + n), found: self.bytes.len() });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        let x = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if !x.is_finite() {
            return Err(Error::Format("non-finite value in payload".into()));
        }
        Ok(x)
    }
}

pub fn read_dataset(path: &Path) -> Result<LinearizedDataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, total: 0 };
    if cur.take(MAGIC.len()).map(|m| m != MAGIC).unwrap_or(true) {
        return Err(Error::BadMagic);
    }
    let flags = cur.take(1)?[0];
    if flags > 1 {
        return Err(Error::Format(format!("unknown flags byte {flags:#04x}")));
    }
    let loss = if flags & 1 == 0 { LossKind::SquaredError } else { LossKind::CrossEntropy };
    let n = cur.u64()? as usize;
    let k = cur.u64()? as usize;
    let t = cur.u64()? as usize;
    if n == 0 || k == 0 || t == 0 {
        return Err(Error::Format("N, K, T must all be >= 1".into()));
    }
    let mut blocks = Vec::with_capacity(t);
    for _ in 0..t {
        let mi = cur.u64()? as usize;
        let ni = cur.u64()? as usize;
        blocks.push((mi, ni));
    }
    let shape = BlockShape::new(blocks).map_err(|e| Error::Format(e.to_string()))?;
    let expected = expected_file_len(n, k, &shape, loss);
    if bytes.len() != expected {
        return Err(Error::Truncated { expected, found: bytes.len() });
    }
    cur.total = expected;

    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut f0 = DVector::zeros(k);
        for j in 0..k {
            f0[j] = cur.f64()?;
        }
        let label = match loss {
            LossKind::CrossEntropy => {
                let c = cur.u64()? as usize;
                if c >= k {
                    return Err(Error::Format(format!("class index {c} out of range (K = {k})")));
                }
                Label::Class(c)
            }
            LossKind::SquaredError => {
                let mut y = DVector::zeros(k);
                for j in 0..k {
                    y[j] = cur.f64()?;
                }
                Label::Target(y)
            }
        };
        let mut per_coord = Vec::with_capacity(k);
        for _ in 0..k {
            let mut coord = Vec::with_capacity(shape.num_blocks());
            for &(mi, ni) in shape.blocks() {
                let mut block = DMatrix::zeros(mi, ni);
                for r in 0..mi {
                    for c in 0..ni {
                        block[(r, c)] = cur.f64()?;
                    }
                }
                coord.push(block);
            }
            per_coord.push(coord);
        }
        let features =
            FeatureMap::new(shape.clone(), per_coord).map_err(|e| Error::Format(e.to_string()))?;
        samples.push(LinearizedSample { features, base_output: f0, label });
    }
    LinearizedDataset::new(samples, loss).map_err(|e| Error::Format(e.to_string()))
}

/// Plain-text `key=value` experiment configuration. Unknown keys are
/// rejected; `#`-prefixed lines and blank lines are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: String,
    pub seed: u64,
    pub rank: usize,
    /// Weight decay / nuclear regularization strength.
    pub lambda: f64,
    pub step_size: f64,
    pub epochs: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub init: InitScheme,
    pub sigma_init: f64,
    pub noise_std: f64,
    pub perturb_eps: f64,
    pub tol_grad: f64,
    pub tol_hess: f64,
    pub rank_tol: f64,
    pub runs: usize,
    pub eta: f64,
    pub slack_eps: f64,
    pub n_pop: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: "toy-c".into(),
            seed: 0,
            rank: 1,
            lambda: 0.01,
            step_size: 5e-4,
            epochs: 10_000,
            batch_size: 32,
            init: InitScheme::LoraStandard,
            sigma_init: 1e-2,
            noise_std: 0.0,
            perturb_eps: 0.0,
            tol_grad: 1e-6,
            tol_hess: 1e-6,
            rank_tol: 1e-8,
            runs: 20,
            eta: 0.1,
            slack_eps: 1e-3,
            n_pop: 10_000,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key=value", lineno + 1)));
            };
            let key = key.trim();
            let value = value.trim();
            match key {
                "task" => cfg.task = value.to_string(),
                "seed" => cfg.seed = parse_num(key, value)?,
                "rank" => cfg.rank = parse_num(key, value)?,
                "lambda" => cfg.lambda = parse_num(key, value)?,
                "step_size" => cfg.step_size = parse_num(key, value)?,
                "epochs" => cfg.epochs = parse_num(key, value)?,
                "batch_size" => {
                    cfg.batch_size = if value == "full" { 0 } else { parse_num(key, value)? }
                }
                "init" => {
                    cfg.init = match value {
                        "lora-standard" | "lora" => InitScheme::LoraStandard,
                        "both-gaussian" | "gaussian" => InitScheme::BothGaussian,
                        other => {
                            return Err(Error::Config(format!("unknown init scheme `{other}`")))
                        }
                    }
                }
                "sigma_init" => cfg.sigma_init = parse_num(key, value)?,
                "noise_std" => cfg.noise_std = parse_num(key, value)?,
                "perturb_eps" => cfg.perturb_eps = parse_num(key, value)?,
                "tol_grad" => cfg.tol_grad = parse_num(key, value)?,
                "tol_hess" => cfg.tol_hess = parse_num(key, value)?,
                "rank_tol" => cfg.rank_tol = parse_num(key, value)?,
                "runs" => cfg.runs = parse_num(key, value)?,
                "eta" => cfg.eta = parse_num(key, value)?,
                "slack_eps" => cfg.slack_eps = parse_num(key, value)?,
                "n_pop" => cfg.n_pop = parse_num(key, value)?,
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                other => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be >= 1".into()));
        }
        if self.step_size <= 0.0 {
            return Err(Error::Config("step_size must be > 0".into()));
        }
        if self.lambda < 0.0 || self.perturb_eps < 0.0 {
            return Err(Error::Config("lambda and perturb_eps must be >= 0".into()));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Config("eta must be in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            rank: self.rank,
            lambda: self.lambda,
            step_size: self.step_size,
            epochs: self.epochs,
            batch_size: if self.batch_size == 0 { None } else { Some(self.batch_size) },
            init: self.init,
            sigma_init: self.sigma_init,
            noise_std: self.noise_std,
            seed: self.seed,
            perturb_eps: self.perturb_eps,
            tol_grad: self.tol_grad,
            backtrack: true,
        }
    }

    /// Render back to the key=value format (parse . render = id).
    pub fn render(&self) -> String {
        let init = match self.init {
            InitScheme::LoraStandard => "lora-standard",
            InitScheme::BothGaussian => "both-gaussian",
        };
        format!(
            "task={}\nseed={}\nrank={}\nlambda={}\nstep_size={}\nepochs={}\n\
             batch_size={}\ninit={}\nsigma_init={}\nnoise_std={}\nperturb_eps={}\n\
             tol_grad={}\ntol_hess={}\nrank_tol={}\nruns={}\neta={}\nslack_eps={}\n\
             n_pop={}\nout_dir={}\n",
            self.task,
            self.seed,
            self.rank,
            self.lambda,
            self.step_size,
            self.epochs,
            self.batch_size,
            init,
            self.sigma_init,
            self.noise_std,
            self.perturb_eps,
            self.tol_grad,
            self.tol_hess,
            self.rank_tol,
            self.runs,
            self.eta,
            self.slack_eps,
            self.n_pop,
            self.out_dir.display(),
        )
    }
}

/// Write a loss curve as `epoch,factored_risk,regularized_risk,grad_norm`.
pub fn write_trace_csv(path: &Path, records: &[crate::optim::EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,factored_risk,regularized_risk,grad_norm\n");
    for r in records {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e}\n",
            r.epoch, r.factored_risk, r.regularized_risk, r.grad_norm
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("json: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landscape::{toy_instance, ToyInstance};
    use crate::model::tests::random_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for loss in [LossKind::SquaredError, LossKind::CrossEntropy] {
            let data = random_dataset(&mut rng, vec![(2, 3), (4, 1)], 3, 5, loss);
            let p1 = dir.path().join("a.lntk");
            let p2 = dir.path().join("b.lntk");
            write_dataset(&p1, &data).unwrap();
            let back = read_dataset(&p1).unwrap();
            write_dataset(&p2, &back).unwrap();
            let b1 = std::fs::read(&p1).unwrap();
            let b2 = std::fs::read(&p2).unwrap();
            assert_eq!(b1, b2);
            assert_eq!(b1.len(), expected_file_len(5, 3, data.shape(), loss));
        }
    }

    #[test]
    fn toy_c_file_size_matches_header_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_instance(ToyInstance::C);
        let path = dir.path().join("c.lntk");
        write_dataset(&path, &data).unwrap();
        // magic 6 + flags 1 + (N, K, T) 24 + one (m, n) pair 16 = 47
        // header bytes; each sample: f0 8 + target 8 + 4 features 32 = 48.
        let expect = 6 + 1 + 24 + 16 + 3 * 48;
        assert_eq!(std::fs::read(&path).unwrap().len(), expect);
        assert_eq!(expect, expected_file_len(3, 1, data.shape(), LossKind::SquaredError));
    }

    #[test]
    fn corrupted_magic_and_truncation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_instance(ToyInstance::A);
        let path = dir.path().join("x.lntk");
        write_dataset(&path, &data).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::BadMagic)));

        std::fs::write(&path, &good[..good.len() - 4]).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Truncated { .. })));

        let mut long = good.clone();
        long.push(0);
        std::fs::write(&path, &long).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Truncated { .. })));
    }

    #[test]
    fn non_finite_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_instance(ToyInstance::A);
        let path = dir.path().join("nan.lntk");
        write_dataset(&path, &data).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let tail = bytes.len() - 8;
        bytes[tail..].copy_from_slice(&f64::NAN.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format(_))));
    }

    #[test]
    fn config_defaults_and_parsing() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.lambda, 0.01);
        assert_eq!(cfg.step_size, 5e-4);

        let cfg = ExperimentConfig::parse(
            "# comment\ntask=toy-a\nrank=3\nlambda=0.5\nbatch_size=full\ninit=both-gaussian\n",
        )
        .unwrap();
        assert_eq!(cfg.task, "toy-a");
        assert_eq!(cfg.rank, 3);
        assert_eq!(cfg.batch_size, 0);
        assert_eq!(cfg.init, InitScheme::BothGaussian);
        assert!(cfg.to_train_config().batch_size.is_none());
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            ExperimentConfig::parse("learning_rate=0.1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(ExperimentConfig::parse("rank=banana\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("rank: 3\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("eta=1.5\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("rank=0\n"), Err(Error::Config(_))));
    }

    #[test]
    fn config_render_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.task = "synthetic-mse".into();
        cfg.rank = 7;
        cfg.perturb_eps = 1e-3;
        cfg.batch_size = 0;
        let back = ExperimentConfig::parse(&cfg.render()).unwrap();
        assert_eq!(cfg, back);
    }
}
