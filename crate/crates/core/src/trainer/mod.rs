//! Unsupervised reconstruction training of the encoder/decoder pair.

mod adam;
mod loss;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, lr_schedule, AdamState, BETA1, BETA2, EPSILON};
pub use loss::{loss_graph, loss_terms, loss_total, LossValue, LossVars};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::image::{load_image, Plane};
use crate::network::{decoder_graph, encoder_graph, reconstruct, ChannelPlan, NetworkParams};
use crate::tensor::Tensor;
use crate::weights::save_weights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the SSIM term.
    pub lambda: f32,
    pub base_lr: f32,
    /// Multiplicative decay applied every `decay_every` epochs.
    pub lr_decay: f32,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub patch_size: usize,
    /// Random crops drawn from each training image per epoch.
    pub patches_per_image: usize,
    pub plan: ChannelPlan,
    /// Best-validation checkpoint, rewritten whenever validation improves.
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines history, one record per epoch.
    pub history: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 3.0,
            base_lr: 1e-4,
            lr_decay: 0.8,
            decay_every: 2,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            patch_size: 64,
            patches_per_image: 1,
            plan: ChannelPlan::default(),
            checkpoint: None,
            history: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be >= 0"));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::invalid("learning rate must be > 0"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid("lr decay must be in (0, 1]"));
        }
        if self.batch_size == 0 || self.patches_per_image == 0 {
            return Err(Error::invalid("batch size and patches per image must be positive"));
        }
        if self.patch_size < crate::ssim::WINDOW {
            return Err(Error::invalid(format!(
                "patch size must be at least {}",
                crate::ssim::WINDOW
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        lr_schedule(epoch, self.base_lr, self.lr_decay, self.decay_every)
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f32,
    pub val_loss: f32,
    pub val_ssim: f32,
}

/// Grayscale training and validation images.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub train: Vec<Plane>,
    pub validation: Vec<Plane>,
}

impl Corpus {
    pub fn new(train: Vec<Plane>, validation: Vec<Plane>) -> Self {
        Self { train, validation }
    }

    /// Loads every PNG/PGM/PPM file in `dir` (sorted by name) as grayscale and
    /// holds out the last `validation_fraction` of them.
    pub fn load_dir(dir: impl AsRef<Path>, validation_fraction: f32) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "ppm" | "pnm"))
                    .unwrap_or(false)
            })
            .collect();
        paths.sort();
        let images = paths
            .iter()
            .map(|p| Ok(load_image(p)?.to_real().luma()))
            .collect::<Result<Vec<_>>>()?;
        let n_val = ((images.len() as f32) * validation_fraction).round() as usize;
        let n_val = n_val.min(images.len().saturating_sub(1));
        let mut train = images;
        let validation = train.split_off(train.len() - n_val);
        Ok(Self { train, validation })
    }
}

/// Result of a completed run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest validation loss.
    pub best: NetworkParams,
    pub best_epoch: usize,
    /// Parameters after the final epoch.
    pub last: NetworkParams,
    pub history: Vec<EpochRecord>,
}

fn center_crop(p: &Plane, size: usize) -> Result<Plane> {
    p.crop((p.width() - size) / 2, (p.height() - size) / 2, size, size)
}

/// Mean loss and SSIM of `params` on fixed patches.
pub fn evaluate_reconstruction(
    params: &NetworkParams,
    patches: &[Plane],
    lambda: f32,
    batch_size: usize,
) -> Result<(f32, f32)> {
    if patches.is_empty() {
        return Err(Error::Empty { what: "evaluation set" });
    }
    let mut loss_sum = 0.0f64;
    let mut ssim_sum = 0.0f64;
    for chunk in patches.chunks(batch_size.max(1)) {
        let batch = Tensor::stack(&chunk.iter().map(Plane::to_tensor).collect::<Vec<_>>())?;
        let mut tape = Tape::new();
        let vars = params.constants(&mut tape);
        let x = tape.leaf(batch.clone());
        let enc = encoder_graph(&mut tape, &vars.encoder, x)?;
        let out = decoder_graph(&mut tape, &vars.decoder, enc.features)?;
        let l = loss_graph(&mut tape, out, &batch, lambda)?;
        let n = chunk.len() as f64;
        loss_sum += tape.value(l.total).data()[0] as f64 * n;
        ssim_sum += tape.value(l.ssim).data()[0] as f64 * n;
    }
    let n = patches.len() as f64;
    Ok(((loss_sum / n) as f32, (ssim_sum / n) as f32))
}

/// Negates the output kernel when the initial reconstruction has a negative
/// mean. With inputs in `[0, 1]`, a negative output can pair inverted
/// structure with inverted luminance, whose product still scores positive
/// SSIM; starting there, training settles on an inverted image. The
/// kernel distribution is symmetric, so the negated kernel is an equally
/// likely draw.
pub fn orient_output(params: &mut NetworkParams, probes: &[Plane]) -> Result<bool> {
    let mut total = 0.0f64;
    for p in probes {
        total += reconstruct(params, &p.to_tensor())?.sum();
    }
    let flip = total < 0.0;
    if flip {
        params.decoder.c5.weight = params.decoder.c5.weight.map(|v| -v);
        params.decoder.c5.bias = params.decoder.c5.bias.map(|v| -v);
    }
    Ok(flip)
}

/// Trains from a seeded initialization. Deterministic for a fixed
/// `(corpus, config)`.
pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(corpus, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::Empty { what: "training corpus" });
    }
    let p = cfg.patch_size;
    for img in corpus.train.iter().chain(&corpus.validation) {
        if img.width() < p || img.height() < p {
            return Err(Error::invalid(format!(
                "image {}x{} is smaller than the {p}x{p} patch",
                img.width(),
                img.height()
            )));
        }
    }
    let val_source = if corpus.validation.is_empty() {
        &corpus.train
    } else {
        &corpus.validation
    };
    let val_patches = val_source
        .iter()
        .map(|img| center_crop(img, p))
        .collect::<Result<Vec<_>>>()?;

    let mut history_file = match &cfg.history {
        Some(path) => Some(BufWriter::new(File::create(path)?)),
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = NetworkParams::init(cfg.plan, rng.random());
    let probes: Vec<Plane> = corpus
        .train
        .iter()
        .take(4)
        .map(|img| center_crop(img, p))
        .collect::<Result<_>>()?;
    if orient_output(&mut params, &probes)? {
        debug!("initial output mean was negative; output kernel negated");
    }
    let mut state = AdamState::new(params.entries().into_iter().map(|(n, t)| (n, t.shape())));
    let mut best: Option<(f32, usize, NetworkParams)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut samples: Vec<(usize, usize, usize)> = (0..corpus.train.len())
            .flat_map(|i| std::iter::repeat_n(i, cfg.patches_per_image))
            .map(|i| {
                let img = &corpus.train[i];
                (i, rng.random_range(0..=img.width() - p), rng.random_range(0..=img.height() - p))
            })
            .collect();
        samples.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        for batch_idx in samples.chunks(cfg.batch_size) {
            let patches = batch_idx
                .iter()
                .map(|&(i, x, y)| Ok(corpus.train[i].crop(x, y, p, p)?.to_tensor()))
                .collect::<Result<Vec<_>>>()?;
            let batch = Tensor::stack(&patches)?;

            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let x = tape.leaf(batch.clone());
            let enc = encoder_graph(&mut tape, &vars.encoder, x)?;
            let out = decoder_graph(&mut tape, &vars.decoder, enc.features)?;
            let l = loss_graph(&mut tape, out, &batch, cfg.lambda)?;
            let value = tape.value(l.total).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("loss is {value}"),
                });
            }
            let grads = tape.backward(l.total)?;
            adam_step(params.entries_mut(), &grads, &mut state, lr).map_err(|e| match e {
                Error::NonFiniteGradient { name } => Error::Diverged {
                    epoch,
                    reason: format!("non-finite gradient for `{name}`"),
                },
                other => other,
            })?;
            loss_sum += value as f64 * batch_idx.len() as f64;
            debug!("epoch {epoch} step {} loss {value:.5}", state.step());
        }

        let (val_loss, val_ssim) = evaluate_reconstruction(&params, &val_patches, cfg.lambda, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: format!("validation loss is {val_loss}"),
            });
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: (loss_sum / samples.len() as f64) as f32,
            val_loss,
            val_ssim,
        };
        info!(
            "epoch {epoch}: lr {lr:.3e} train {:.5} val {val_loss:.5} ssim {val_ssim:.4}",
            record.train_loss
        );
        if let Some(f) = history_file.as_mut() {
            serde_json::to_writer(&mut *f, &record)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        if best.as_ref().is_none_or(|(v, _, _)| val_loss < *v) {
            let mut snapshot = params.clone();
            snapshot.metadata.creation = format!("trained seed={} epoch={epoch}", cfg.seed);
            if let Some(path) = &cfg.checkpoint {
                save_weights(&snapshot, path)?;
            }
            best = Some((val_loss, epoch, snapshot));
        }
        on_epoch(&record);
        history.push(record);
    }

    params.metadata.creation = format!("trained seed={} epochs={}", cfg.seed, cfg.epochs);
    let (best_epoch, best) = match best {
        Some((_, e, b)) => (e, b),
        None => (0, params.clone()),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: params,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_plan() -> ChannelPlan {
        ChannelPlan {
            growth: 4,
            se_hidden: 2,
            decoder: [8, 8, 4],
        }
    }

    fn textured(w: usize, h: usize, phase: f32) -> Plane {
        Plane::from_fn(w, h, |x, y| {
            0.5 + 0.3 * ((x as f32 * 0.9 + phase).sin() * (y as f32 * 0.6 - phase).cos())
        })
    }

    #[test]
    fn rejects_bad_configs_and_empty_corpus() {
        let cfg = TrainConfig {
            lr_decay: 1.5,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            lambda: -1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let err = train(&Corpus::default(), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Empty { .. }));
    }

    #[test]
    fn history_length_and_determinism() {
        let corpus = Corpus::new(
            (0..3).map(|i| textured(20, 18, i as f32)).collect(),
            vec![textured(16, 16, 9.0)],
        );
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            patch_size: 16,
            base_lr: 1e-3,
            plan: tiny_plan(),
            seed: 5,
            history: Some(dir.path().join("h.jsonl")),
            checkpoint: Some(dir.path().join("best.sfw")),
            ..TrainConfig::default()
        };
        let a = train(&corpus, &cfg).unwrap();
        let b = train(&corpus, &TrainConfig { history: None, checkpoint: None, ..cfg.clone() }).unwrap();
        assert_eq!(a.history.len(), 3);
        assert_eq!(a.last, b.last);
        assert_eq!(a.history, b.history);
        let lines = std::fs::read_to_string(dir.path().join("h.jsonl")).unwrap();
        let parsed: Vec<EpochRecord> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(parsed, a.history);
        let saved = crate::weights::load_weights(dir.path().join("best.sfw")).unwrap();
        assert_eq!(saved.encoder, a.best.encoder);
    }

    #[test]
    fn rejects_images_smaller_than_patch() {
        let corpus = Corpus::new(vec![textured(10, 40, 0.0)], vec![]);
        let cfg = TrainConfig {
            patch_size: 16,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&corpus, &cfg), Err(Error::InvalidArgument(_))));
    }
}
