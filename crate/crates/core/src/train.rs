//! Mini-batch Adam training on gold-annotated pairs.

use rayon::prelude::*;

use crate::config::parse_value;
use crate::corpus::{enumerate_pairs, AnnotatedParagraph, PairMode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ModelParams;
use crate::tensor::{derived_rng, shuffle};
use crate::variants::paragraph_loss_and_grad;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSpec {
    pub epochs: usize,
    /// Paragraphs per step.
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip: f64,
    pub seed: u64,
    /// Evaluate every this many epochs; 0 disables.
    pub eval_every: usize,
    /// Worker threads for per-paragraph gradients. Results do not depend on it.
    pub threads: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            epochs: 30,
            batch: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip: 1.0,
            seed: 42,
            eval_every: 0,
            threads: 1,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.clip >= 0.0) {
            return bad("adam_eps must be positive and clip non-negative");
        }
        if self.threads == 0 {
            return bad("threads must be positive");
        }
        Ok(())
    }

    /// Applies one `key=value` setting. Returns `false` for unknown keys.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch" => self.batch = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            "clip" => self.clip = parse_value(key, value)?,
            "train_seed" => self.seed = parse_value(key, value)?,
            "eval_every" => self.eval_every = parse_value(key, value)?,
            "threads" => self.threads = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn render(&self) -> String {
        format!(
            "epochs={}\nbatch={}\nlr={:e}\nbeta1={}\nbeta2={}\nadam_eps={:e}\nclip={}\ntrain_seed={}\neval_every={}\nthreads={}\n",
            self.epochs,
            self.batch,
            self.lr,
            self.beta1,
            self.beta2,
            self.adam_eps,
            self.clip,
            self.seed,
            self.eval_every,
            self.threads
        )
    }
}

/// Mean pair loss of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<StepLoss>,
}

impl TrainOutcome {
    /// `epoch,step,loss` lines.
    pub fn render_curve(&self) -> String {
        let mut out = String::from("epoch,step,loss\n");
        for s in &self.curve {
            out.push_str(&format!("{},{},{:.17e}\n", s.epoch, s.step, s.loss));
        }
        out
    }
}

pub struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One bias-corrected update.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, spec: &TrainSpec) {
        self.t += 1;
        let c1 = 1.0 - spec.beta1.powi(self.t);
        let c2 = 1.0 - spec.beta2.powi(self.t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for (((_, p), (_, g)), ((_, m), (_, v))) in tensors {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = spec.beta1 * m[i] + (1.0 - spec.beta1) * gi;
                v[i] = spec.beta2 * v[i] + (1.0 - spec.beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= spec.lr * mhat / (vhat.sqrt() + spec.adam_eps);
            }
        }
    }
}

/// Summed loss and summed gradient over `batch`, reduced in paragraph order
/// so the result does not depend on the thread count.
pub fn batch_gradient(
    model: &Model,
    batch: &[&AnnotatedParagraph],
    pool: Option<&rayon::ThreadPool>,
) -> Result<(f64, usize, ModelParams)> {
    let one = |p: &&AnnotatedParagraph| -> Result<(f64, usize, ModelParams)> {
        let pairs = enumerate_pairs(p, PairMode::GoldOnly);
        let gold = model.gold_ids(p, &pairs)?;
        let mut g = model.params.zeros_like();
        let loss = paragraph_loss_and_grad(model, p, &pairs, &gold, &mut g)?;
        Ok((loss, pairs.len(), g))
    };
    let parts: Vec<Result<(f64, usize, ModelParams)>> = match pool {
        Some(pool) => pool.install(|| batch.par_iter().map(one).collect()),
        None => batch.iter().map(one).collect(),
    };
    let mut total = model.params.zeros_like();
    let mut loss = 0.0;
    let mut pairs = 0;
    for part in parts {
        let (l, n, g) = part?;
        loss += l;
        pairs += n;
        total.add_assign(&g);
    }
    Ok((loss, pairs, total))
}

/// Trains `model` in place on the gold pairs of `corpus`.
///
/// `on_epoch` runs after every epoch with the epoch index (1-based) and the
/// current model; returning an error stops training.
pub fn train_with<F>(mut model: Model, corpus: &[AnnotatedParagraph], spec: &TrainSpec, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(usize, &Model) -> Result<()>,
{
    spec.validate()?;
    model.config.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let pool = if spec.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(spec.threads)
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let mut adam = Adam::new(&model.params);
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut step = 0;
    for epoch in 1..=spec.epochs {
        let mut rng = derived_rng(spec.seed, &format!("train/epoch/{epoch}"));
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(spec.batch) {
            let batch: Vec<&AnnotatedParagraph> = chunk.iter().map(|&i| &corpus[i]).collect();
            let (loss_sum, pairs, mut grads) = batch_gradient(&model, &batch, pool.as_ref())?;
            if pairs == 0 {
                continue;
            }
            step += 1;
            let loss = loss_sum / pairs as f64;
            if !loss.is_finite() || !grads.tensors().iter().all(|(_, g)| g.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    loss,
                    last_good: Box::new(model),
                });
            }
            grads.scale(1.0 / pairs as f64);
            if spec.clip > 0.0 {
                let norm = grads.sum_squares().sqrt();
                if norm > spec.clip {
                    grads.scale(spec.clip / norm);
                }
            }
            adam.step(&mut model.params, &grads, spec);
            curve.push(StepLoss { epoch, step, loss });
        }
        on_epoch(epoch, &model)?;
    }
    Ok(TrainOutcome { model, curve })
}

pub fn train(model: Model, corpus: &[AnnotatedParagraph], spec: &TrainSpec) -> Result<TrainOutcome> {
    train_with(model, corpus, spec, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, PassMode, Variant};
    use crate::corpus::{gen_synthetic, SyntheticSpec};
    use crate::variants::predict;

    fn data(n: usize) -> Vec<AnnotatedParagraph> {
        gen_synthetic(&SyntheticSpec {
            paragraphs: n,
            seed: 11,
            ..Default::default()
        })
        .unwrap()
    }

    fn small(variant: Variant, mode: PassMode, c: &[AnnotatedParagraph]) -> Model {
        let cfg = ModelConfig {
            variant,
            mode,
            d_model: 16,
            ff: 32,
            ..Default::default()
        };
        Model::for_corpus(cfg, c).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let c = data(6);
        let m = small(Variant::EntityAware, PassMode::OnePass, &c);
        let spec = TrainSpec {
            epochs: 2,
            lr: 0.0,
            batch: 2,
            ..Default::default()
        };
        let out = train(m.clone(), &c, &spec).unwrap();
        assert_eq!(out.model.params, m.params);
        assert_eq!(out.curve.len(), 6);
    }

    #[test]
    fn zero_gradient_step_is_zero() {
        let c = data(1);
        let m = small(Variant::PlainSp, PassMode::OnePass, &c);
        let mut p = m.params.clone();
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &m.params.zeros_like(), &TrainSpec::default());
        assert_eq!(p, m.params);
    }

    #[test]
    fn thread_count_does_not_change_result() {
        let c = data(10);
        let m = small(Variant::EntityAware, PassMode::OnePass, &c);
        let spec = TrainSpec {
            epochs: 1,
            batch: 5,
            ..Default::default()
        };
        let a = train(m.clone(), &c, &spec).unwrap();
        let b = train(m, &c, &TrainSpec { threads: 3, ..spec }).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.curve, b.curve);
    }

    #[test]
    fn single_paragraph_overfits() {
        let c = data(1);
        let m = small(Variant::EntityAware, PassMode::OnePass, &c);
        let spec = TrainSpec {
            epochs: 200,
            batch: 1,
            lr: 1e-2,
            ..Default::default()
        };
        let out = train(m, &c, &spec).unwrap();
        let last = out.curve.last().unwrap().loss;
        assert!(last < 0.01, "final loss {last}");
        let pairs = enumerate_pairs(&c[0], PairMode::GoldOnly);
        let gold = out.model.gold_ids(&c[0], &pairs).unwrap();
        let pred: Vec<usize> = predict(&out.model, &c[0], &pairs).unwrap().iter().map(|p| p.label).collect();
        assert_eq!(pred, gold);
    }

    #[test]
    fn spec_round_trip() {
        let spec = TrainSpec {
            lr: 3e-4,
            threads: 4,
            ..Default::default()
        };
        let mut back = TrainSpec::default();
        for (k, v) in crate::config::parse_key_values(&spec.render()).unwrap() {
            assert!(back.apply(&k, &v).unwrap());
        }
        assert_eq!(back, spec);
    }
}
