//! Teacher-forced training with Adam, validation BLEU and checkpoints.

mod adam;
mod checkpoint;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{batch_pairs, Batch, EncodedPair};
use crate::error::{Error, Result};
use crate::metrics::{corpus_bleu, BleuConfig};
use crate::model::{mix_seed, KTransformer, Pass};
use crate::tensor::{Graph, ParamId, Reduction, Scalar, Tensor};

pub use adam::{adam_step, clip_global_norm, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION,
};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Steps of linear warmup from 0 to `lr`; 0 disables warmup.
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub batch_size: usize,
    /// Validate every this many steps (and after the last step); 0 disables.
    pub val_interval: u64,
    /// Seeds batch order and dropout.
    pub seed: u64,
    pub clip_norm: f64,
    /// Directory for the log and checkpoints; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            warmup_steps: 0,
            max_steps: 1000,
            batch_size: 32,
            val_interval: 100,
            seed: 0,
            clip_norm: 1.0,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        Ok(())
    }

    /// Learning rate used at (1-based) `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub val_bleu: Option<f64>,
    pub wall_ms: u128,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar = f32> {
    pub log: Vec<LogRow>,
    pub best_val_bleu: Option<f64>,
    pub best_step: Option<u64>,
    pub adam: AdamState<T>,
}

/// Token-averaged teacher-forced loss of a padded batch and its gradients.
pub fn batch_loss<T: Scalar>(
    model: &KTransformer<T>,
    batch: &Batch,
    pass: &mut Pass,
) -> Result<(f64, Vec<(ParamId, Tensor<T>)>)> {
    let mut g = Graph::with_params(model.params());
    let mut total = None;
    let mut tokens = 0;
    for (src, tgt) in batch.src.iter().zip(&batch.tgt) {
        let (loss, n) = model.pair_loss(&mut g, src, tgt, pass, Reduction::Sum, None)?;
        tokens += n;
        total = Some(match total {
            None => loss,
            Some(t) => g.add(t, loss)?,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("empty batch"))?;
    let mean = g.scale(total, 1.0 / tokens as f64)?;
    let value = g.value(mean).data()[0].as_f64();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    g.backward(mean)?;
    Ok((value, g.param_grads()))
}

/// Corpus BLEU (add-one smoothed) of greedy translations of `pairs`.
pub fn validation_bleu<T: Scalar>(model: &KTransformer<T>, pairs: &[EncodedPair]) -> Result<f64> {
    let mut hyps = Vec::with_capacity(pairs.len());
    for p in pairs {
        hyps.push((model.greedy_translate(&p.src, model.config().max_len)?, p.tgt.clone()));
    }
    let scored: Vec<_> = hyps.into_iter().filter(|(_, r)| !r.is_empty()).collect();
    if scored.is_empty() {
        return Ok(0.0);
    }
    Ok(corpus_bleu(&scored, &BleuConfig::default().smoothed())?.score)
}

struct Outputs {
    dir: Option<PathBuf>,
    log: Option<BufWriter<File>>,
}

impl Outputs {
    fn open(dir: Option<&PathBuf>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self { dir: None, log: None });
        };
        fs::create_dir_all(dir)?;
        let mut log = BufWriter::new(File::create(dir.join(TRAIN_LOG))?);
        writeln!(log, "step,loss,val_bleu,wall_ms")?;
        log.flush()?;
        Ok(Self {
            dir: Some(dir.clone()),
            log: Some(log),
        })
    }

    fn row(&mut self, r: &LogRow) -> Result<()> {
        if let Some(log) = &mut self.log {
            let bleu = r.val_bleu.map(|b| format!("{b:.6}")).unwrap_or_default();
            writeln!(log, "{},{:.6},{},{}", r.step, r.loss, bleu, r.wall_ms)?;
            log.flush()?;
        }
        Ok(())
    }

    fn save<T: Scalar>(
        &self,
        name: &str,
        model: &KTransformer<T>,
        adam: &AdamState<T>,
        step: u64,
        meta: &BTreeMap<String, String>,
    ) -> Result<()> {
        match &self.dir {
            Some(dir) => save_checkpoint(&dir.join(name), model, Some(adam), step, meta),
            None => Ok(()),
        }
    }
}

/// [`train_with`] without a progress callback.
pub fn train<T: Scalar>(
    model: &mut KTransformer<T>,
    pairs: &[EncodedPair],
    valid: &[EncodedPair],
    config: &TrainConfig,
    metadata: &BTreeMap<String, String>,
) -> Result<TrainOutcome<T>> {
    train_with(model, pairs, valid, config, metadata, |_| {})
}

/// Runs `config.max_steps` optimizer steps over reshuffled epochs of `pairs`.
///
/// With an output directory it writes `train_log.csv`, `best.ckpt` (highest
/// validation BLEU) and `final.ckpt`. A non-finite loss or gradient stops
/// training with [`Error::Diverged`] after saving the pre-step weights as
/// `last_good.ckpt`.
pub fn train_with<T: Scalar>(
    model: &mut KTransformer<T>,
    pairs: &[EncodedPair],
    valid: &[EncodedPair],
    config: &TrainConfig,
    metadata: &BTreeMap<String, String>,
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut out = Outputs::open(config.out_dir.as_ref())?;
    let mut adam = AdamState::new(model.params(), config.lr);
    let start = Instant::now();
    let mut log = Vec::new();
    let mut best: Option<(f64, u64)> = None;
    let mut epoch = 0u64;
    let mut queue: Vec<Batch> = Vec::new();

    for step in 1..=config.max_steps {
        if queue.is_empty() {
            queue = batch_pairs(pairs, config.batch_size, mix_seed(config.seed, epoch))?;
            queue.reverse();
            epoch += 1;
        }
        let batch = queue.pop().expect("refilled above");
        let mut pass = Pass::train(mix_seed(config.seed ^ 0x5EED, step));
        let (loss, mut grads) = match batch_loss(model, &batch, &mut pass) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => (f64::NAN, Vec::new()),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            out.save(LAST_GOOD_CHECKPOINT, model, &adam, step - 1, metadata)?;
            return Err(Error::Diverged { step, loss });
        }
        clip_global_norm(&mut grads, config.clip_norm);
        adam.lr = config.lr_at(step);
        match adam_step(model.params_mut(), &grads, &mut adam) {
            Ok(()) => {}
            Err(Error::NonFinite(_)) => {
                out.save(LAST_GOOD_CHECKPOINT, model, &adam, step - 1, metadata)?;
                return Err(Error::Diverged { step, loss });
            }
            Err(e) => return Err(e),
        }

        let validate = !valid.is_empty()
            && config.val_interval > 0
            && (step % config.val_interval == 0 || step == config.max_steps);
        let val_bleu = if validate {
            Some(validation_bleu(model, valid)?)
        } else {
            None
        };
        if let Some(b) = val_bleu {
            if best.map_or(true, |(bb, _)| b > bb) {
                best = Some((b, step));
                out.save(BEST_CHECKPOINT, model, &adam, step, metadata)?;
            }
        }
        let row = LogRow {
            step,
            loss,
            val_bleu,
            wall_ms: start.elapsed().as_millis(),
        };
        out.row(&row)?;
        on_row(&row);
        log.push(row);
    }
    out.save(FINAL_CHECKPOINT, model, &adam, config.max_steps, metadata)?;
    Ok(TrainOutcome {
        log,
        best_val_bleu: best.map(|b| b.0),
        best_step: best.map(|b| b.1),
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClusterMode, ModelConfig};

    fn setup() -> (KTransformer<f64>, Vec<EncodedPair>) {
        let model = KTransformer::new(ModelConfig {
            d_model: 8,
            heads: 2,
            d_ff: 16,
            layers_enc: 1,
            layers_dec: 1,
            max_len: 8,
            cluster_mode: ClusterMode::Both,
            src_vocab: 8,
            tgt_vocab: 8,
            ..ModelConfig::default()
        })
        .unwrap();
        let pairs = (0..6)
            .map(|i| {
                let s: Vec<usize> = (0..2 + i % 3).map(|j| 4 + (i + j) % 4).collect();
                EncodedPair {
                    index: i,
                    src: s.clone(),
                    tgt: s,
                }
            })
            .collect();
        (model, pairs)
    }

    #[test]
    fn zero_steps_changes_nothing() {
        let (mut m, pairs) = setup();
        let before = m.params().clone();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            max_steps: 0,
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainConfig::default()
        };
        let out = train(&mut m, &pairs, &[], &cfg, &BTreeMap::new()).unwrap();
        assert!(out.log.is_empty());
        assert!(m.params().bit_eq(&before));
        let ck: Checkpoint<f64> = load_checkpoint(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
        assert!(ck.model.params().bit_eq(&before));
        assert!(!dir.path().join(BEST_CHECKPOINT).exists());
    }

    #[test]
    fn same_seed_same_losses() {
        let cfg = TrainConfig {
            max_steps: 10,
            batch_size: 2,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let run = || {
            let (mut m, pairs) = setup();
            train(&mut m, &pairs, &[], &cfg, &BTreeMap::new()).unwrap().log
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 10);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        }
    }

    #[test]
    fn training_reduces_loss_and_writes_outputs() {
        let (mut m, pairs) = setup();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            max_steps: 60,
            batch_size: 3,
            lr: 1e-2,
            val_interval: 20,
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainConfig::default()
        };
        let out = train(&mut m, &pairs, &pairs[..2], &cfg, &BTreeMap::new()).unwrap();
        let first: f64 = out.log[..5].iter().map(|r| r.loss).sum();
        let last: f64 = out.log[55..].iter().map(|r| r.loss).sum();
        assert!(last < first, "{first} -> {last}");
        assert_eq!(out.adam.t, 60);
        let csv = fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
        assert_eq!(csv.lines().count(), 61);
        assert_eq!(csv.lines().filter(|l| !l.split(',').nth(2).unwrap().is_empty()).count(), 4);
        assert!(dir.path().join(BEST_CHECKPOINT).exists());
        let fin: Checkpoint<f64> = load_checkpoint(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
        assert!(fin.model.params().bit_eq(m.params()));
        assert_eq!(fin.step, 60);
    }

    #[test]
    fn divergence_keeps_last_good() {
        let (mut m, pairs) = setup();
        let id = m.params().id("out.b").unwrap();
        let mut b = m.params().get(id).clone();
        b.data_mut()[4] = f64::INFINITY;
        m.params_mut().set(id, b).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            max_steps: 5,
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainConfig::default()
        };
        let err = train(&mut m, &pairs, &[], &cfg, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 1, .. }), "{err}");
        assert!(dir.path().join(LAST_GOOD_CHECKPOINT).exists());
    }

    #[test]
    fn warmup_ramps_linearly() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup_steps: 4,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(1), 0.25);
        assert_eq!(cfg.lr_at(4), 1.0);
        assert_eq!(cfg.lr_at(100), 1.0);
        assert!(TrainConfig { lr: 0.0, ..cfg }.validate().is_err());
    }
}
