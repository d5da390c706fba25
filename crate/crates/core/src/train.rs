//! Mini-batch training with Adam and a step-decayed learning rate.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{augment, Sample};
use crate::encoder::preprocess_depth;
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossReport};
use crate::model::PicrNet;
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const LOG_HEADER: &str = "step,total,bce_out,ssim_out,iou_out,side1,side2,side3,side4";

/// Formats one loss-log row.
pub fn log_row(step: usize, r: &LossReport) -> String {
    let mut row = step.to_string();
    for (_, v) in r.terms() {
        row.push(',');
        row.push_str(&v.to_string());
    }
    row
}

pub struct Trainer {
    pub config: Config,
    pub net: PicrNet,
    pub params: ParamStore<f32>,
    pub adam: Adam,
    /// Optimizer steps taken so far.
    pub step: usize,
    rng: ChaCha8Rng,
}

fn add_into(acc: &mut [Option<Tensor<f32>>], grads: Vec<Option<Tensor<f32>>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += *y;
                }
            }
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

fn check_finite(step: usize, r: &LossReport) -> Result<()> {
    match r.terms().iter().find(|(_, v)| !v.is_finite()) {
        Some((term, _)) => Err(Error::NonFinite {
            step,
            term: (*term).to_string(),
        }),
        None => Ok(()),
    }
}

impl Trainer {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let (net, params) = PicrNet::build(&config.model, config.seed)?;
        let adam = Adam::new(&params);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
        Ok(Self {
            config,
            net,
            params,
            adam,
            step: 0,
            rng,
        })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(ck.config.clone())?;
        ck.restore(&t.config, &mut t.params)?;
        if let Some(a) = &ck.adam {
            t.adam = a.clone();
        }
        t.step = ck.step as usize;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step as u64,
            params: self.params.clone(),
            adam: Some(self.adam.clone()),
        }
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.config.optim.batch).max(1)
    }

    pub fn epoch(&self, samples: usize) -> usize {
        self.step / self.steps_per_epoch(samples)
    }

    /// Loss of one sample and, with `scale`, its gradients times `scale`.
    pub fn sample_gradients(&self, sample: &Sample, scale: f64) -> Result<(LossReport, Vec<Option<Tensor<f32>>>)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let rgb = tape.constant(sample.rgb.clone());
        let depth = tape.constant(preprocess_depth(&sample.depth)?);
        let pred = self.net.forward(&p, rgb, depth)?;
        let (total, report) = total_loss(&pred.sides, pred.out, &sample.gt)?;
        check_finite(self.step + 1, &report)?;
        let mut grads = tape.backward(total.scale(scale))?;
        Ok((report, p.collect_grads(&mut grads)))
    }

    /// One optimizer step on `batch`. Returns the batch-mean loss report.
    pub fn train_step(&mut self, batch: &[Sample], epoch: usize) -> Result<LossReport> {
        let n = batch.len();
        let mut acc: Vec<Option<Tensor<f32>>> = vec![None; self.params.len()];
        let mut mean = LossReport {
            total: 0.0,
            bce_out: 0.0,
            ssim_out: 0.0,
            iou_out: 0.0,
            side: [0.0; 4],
        };
        let w = 1.0 / n as f64;
        for sample in batch {
            let (r, grads) = self.sample_gradients(sample, w)?;
            add_into(&mut acc, grads);
            mean.total += w * r.total;
            mean.bce_out += w * r.bce_out;
            mean.ssim_out += w * r.ssim_out;
            mean.iou_out += w * r.iou_out;
            for (m, s) in mean.side.iter_mut().zip(r.side) {
                *m += w * s;
            }
        }
        self.adam.update(&mut self.params, &acc, self.config.lr_at_epoch(epoch))?;
        self.step += 1;
        Ok(mean)
    }

    /// Trains until `optim.epochs` or `optim.max_steps`, writing the loss log
    /// to `log` and calling `on_epoch` after each finished epoch.
    pub fn run(
        &mut self,
        data: &[Sample],
        log: &mut dyn Write,
        mut on_epoch: impl FnMut(&Trainer, usize) -> Result<()>,
    ) -> Result<Vec<LossReport>> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let o = self.config.optim.clone();
        let per_epoch = self.steps_per_epoch(data.len());
        let total_steps = match o.max_steps {
            0 => o.epochs * per_epoch,
            cap => cap.min(o.epochs * per_epoch),
        };
        if self.step == 0 {
            writeln!(log, "{LOG_HEADER}")?;
        }
        let mut reports = Vec::new();
        let mut order: Vec<usize> = (0..data.len()).collect();
        while self.step < total_steps {
            let epoch = self.step / per_epoch;
            if self.step.is_multiple_of(per_epoch) {
                order.shuffle(&mut self.rng);
            }
            let k = self.step % per_epoch;
            let idx = &order[k * o.batch..((k + 1) * o.batch).min(data.len())];
            let batch: Vec<Sample> = idx
                .iter()
                .map(|&i| {
                    if o.augment {
                        augment(&data[i], &mut self.rng)
                    } else {
                        data[i].clone()
                    }
                })
                .collect();
            let r = self.train_step(&batch, epoch)?;
            writeln!(log, "{}", log_row(self.step, &r))?;
            log::debug!("step {} epoch {epoch} loss {:.5}", self.step, r.total);
            reports.push(r);
            if self.step.is_multiple_of(per_epoch) {
                on_epoch(self, epoch + 1)?;
            }
        }
        log.flush()?;
        Ok(reports)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;

    fn tiny() -> Config {
        let mut c = Config::toy();
        c.model.input_size = 32;
        c.optim.batch = 2;
        c.optim.max_steps = 2;
        c
    }

    #[test]
    fn log_format() {
        let r = LossReport {
            total: 1.5,
            bce_out: 0.5,
            ssim_out: 0.25,
            iou_out: 0.25,
            side: [0.25, 0.125, 0.0625, 0.0625],
        };
        assert_eq!(log_row(3, &r), "3,1.5,0.5,0.25,0.25,0.25,0.125,0.0625,0.0625");
        assert_eq!(LOG_HEADER.split(',').count(), 9);
    }

    #[test]
    fn run_writes_one_row_per_step_and_updates_params() {
        let data = synthetic_dataset(3, 0, 32).unwrap();
        let mut t = Trainer::new(tiny()).unwrap();
        let before = t.params.clone();
        let mut log = Vec::new();
        let mut epochs = Vec::new();
        let reports = t
            .run(&data, &mut log, |_, e| {
                epochs.push(e);
                Ok(())
            })
            .unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(t.step, 2);
        assert_eq!(epochs, [1]);
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with(LOG_HEADER));
        let moved = before.iter().zip(t.params.iter()).filter(|((_, a), (_, b))| a.value != b.value).count();
        assert!(moved > before.len() / 2, "{moved}");
    }

    #[test]
    fn non_finite_loss_names_step_and_term() {
        let data = synthetic_dataset(2, 0, 32).unwrap();
        let mut t = Trainer::new(tiny()).unwrap();
        let id = t.params.id("decoder.stage4.head.bias").unwrap();
        *t.params.value_mut(id) = Tensor::full([1], f32::NAN);
        let err = t.train_step(&data, 0).unwrap_err();
        match err {
            Error::NonFinite { step, term } => {
                assert_eq!(step, 1);
                assert_eq!(term, "total");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn resume_from_checkpoint_matches_continuous_run() {
        let data = synthetic_dataset(2, 5, 32).unwrap();
        let mut a = Trainer::new(tiny()).unwrap();
        let r1 = a.train_step(&data, 0).unwrap();
        let ck = Checkpoint::from_bytes(&a.checkpoint().to_bytes()).unwrap();
        let mut b = Trainer::from_checkpoint(&ck).unwrap();
        let ra = a.train_step(&data, 0).unwrap();
        let rb = b.train_step(&data, 0).unwrap();
        assert_eq!(ra, rb);
        assert_ne!(r1, ra);
    }
}
