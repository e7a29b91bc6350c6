//! Biased matrix-factorization reward model.
//!
//! Completes the user-item reward matrix from a log of observed pairs and
//! serves as the simulated user: environments consult it for every pair the
//! ground-truth log does not cover. An optional small nonlinear head over
//! the concatenated embeddings recovers interactions plain MF cannot fit.

use crate::checkpoint::{read_checkpoint, write_checkpoint, CheckpointData};
use crate::data::InteractionRecord;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{
    add_linear, init_embedding, linear, param_rng, Optimizer, ParamSet, Tape, Tensor,
};
use std::collections::HashSet;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct RewardModelConfig {
    pub latent_dim: usize,
    pub n_negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of records held out for validation RMSE.
    pub val_fraction: f64,
    pub l2: f64,
    /// Target value assigned to sampled unobserved pairs; defaults to the
    /// dataset's minimum reward when unset.
    pub negative_target: Option<f64>,
    pub nonlinear_head: bool,
    pub head_hidden: usize,
    pub seed: u64,
}

impl Default for RewardModelConfig {
    fn default() -> Self {
        RewardModelConfig {
            latent_dim: 8,
            n_negatives: 0,
            epochs: 100,
            lr: 0.01,
            batch_size: 256,
            val_fraction: 0.1,
            l2: 1e-6,
            negative_target: None,
            nonlinear_head: false,
            head_hidden: 16,
            seed: 2023,
        }
    }
}

/// Factorized user/item embedding model with biases; predictions are clipped
/// to the dataset reward range.
#[derive(Clone, Debug)]
pub struct RewardModel {
    params: ParamSet,
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    pub reward_min: f64,
    pub reward_max: f64,
    pub nonlinear_head: bool,
    pub head_hidden: usize,
    pub train_rmse: f64,
    pub val_rmse: f64,
}

const SET_NAME: &str = "reward_model";

impl RewardModel {
    fn build_params(
        n_users: usize,
        n_items: usize,
        d: usize,
        nonlinear_head: bool,
        head_hidden: usize,
        seed: u64,
    ) -> ParamSet {
        let mut set = ParamSet::new(SET_NAME);
        let mut rng = param_rng(seed, SET_NAME, "user_emb");
        set.insert("user_emb", init_embedding(n_users, d, &mut rng));
        let mut rng = param_rng(seed, SET_NAME, "item_emb");
        set.insert("item_emb", init_embedding(n_items, d, &mut rng));
        set.insert("user_bias", Tensor::zeros(vec![n_users, 1]));
        set.insert("item_bias", Tensor::zeros(vec![n_items, 1]));
        set.insert("global_bias", Tensor::vector(vec![0.0]));
        if nonlinear_head {
            add_linear(&mut set, "head1", 2 * d, head_hidden, seed);
            add_linear(&mut set, "head2", head_hidden, 1, seed);
        }
        set
    }

    /// Raw (unclipped) prediction for one pair.
    fn predict_raw(&self, user_id: usize, item_id: usize) -> f64 {
        let d = self.latent_dim;
        let ue = self.params.get("user_emb").expect("user_emb").row(user_id);
        let ie = self.params.get("item_emb").expect("item_emb").row(item_id);
        let mut pred = self.params.get("global_bias").expect("gb").values()[0]
            + self.params.get("user_bias").expect("ub").values()[user_id]
            + self.params.get("item_bias").expect("ib").values()[item_id];
        for f in 0..d {
            pred += ue[f] * ie[f];
        }
        if self.nonlinear_head {
            let w1 = self.params.get("head1.w").expect("head1.w");
            let b1 = self.params.get("head1.b").expect("head1.b");
            let w2 = self.params.get("head2.w").expect("head2.w");
            let b2 = self.params.get("head2.b").expect("head2.b");
            let mut hidden = vec![0.0; self.head_hidden];
            for j in 0..self.head_hidden {
                let mut acc = b1.values()[j];
                for f in 0..d {
                    acc += ue[f] * w1.at(f, j);
                    acc += ie[f] * w1.at(d + f, j);
                }
                hidden[j] = acc.tanh();
            }
            let mut out = b2.values()[0];
            for (j, h) in hidden.iter().enumerate() {
                out += h * w2.at(j, 0);
            }
            pred += out;
        }
        pred
    }

    /// Predicted reward, clipped to the dataset reward range.
    pub fn predict(&self, user_id: usize, item_id: usize) -> Result<f64> {
        if user_id >= self.n_users || item_id >= self.n_items {
            return Err(Error::contract(format!(
                "predict({user_id}, {item_id}) out of range ({} users, {} items)",
                self.n_users, self.n_items
            )));
        }
        Ok(self.predict_raw(user_id, item_id).clamp(self.reward_min, self.reward_max))
    }

    /// The item embedding table (no padding row); used by the continuous
    /// action mapper when a policy has no tracker of its own.
    pub fn item_embeddings(&self) -> &Tensor {
        self.params.get("item_emb").expect("item_emb")
    }

    pub fn save(&self, path: &Path, extra_meta: &[(String, String)]) -> Result<()> {
        let mut meta = vec![
            ("model".to_string(), "reward_mf".to_string()),
            ("n_users".to_string(), self.n_users.to_string()),
            ("n_items".to_string(), self.n_items.to_string()),
            ("latent_dim".to_string(), self.latent_dim.to_string()),
            ("reward_min".to_string(), format!("{:.17e}", self.reward_min)),
            ("reward_max".to_string(), format!("{:.17e}", self.reward_max)),
            ("nonlinear_head".to_string(), self.nonlinear_head.to_string()),
            ("head_hidden".to_string(), self.head_hidden.to_string()),
            ("train_rmse".to_string(), format!("{:.17e}", self.train_rmse)),
            ("val_rmse".to_string(), format!("{:.17e}", self.val_rmse)),
        ];
        meta.extend_from_slice(extra_meta);
        write_checkpoint(path, &meta, &[&self.params])
    }

    pub fn load(path: &Path) -> Result<(RewardModel, CheckpointData)> {
        let data = read_checkpoint(path)?;
        if data.meta_value("model") != Some("reward_mf") {
            return Err(Error::incompatible("checkpoint is not a reward model"));
        }
        let get = |k: &str| -> Result<&str> {
            data.meta_value(k).ok_or_else(|| Error::incompatible(format!("checkpoint missing meta {k}")))
        };
        let n_users: usize = get("n_users")?.parse().map_err(|_| Error::format("bad n_users"))?;
        let n_items: usize = get("n_items")?.parse().map_err(|_| Error::format("bad n_items"))?;
        let latent_dim: usize = get("latent_dim")?.parse().map_err(|_| Error::format("bad latent_dim"))?;
        let parse_f = |s: &str| s.parse::<f64>().map_err(|_| Error::format("bad float meta"));
        let model = RewardModel {
            params: data.to_param_set(SET_NAME)?,
            n_users,
            n_items,
            latent_dim,
            reward_min: parse_f(get("reward_min")?)?,
            reward_max: parse_f(get("reward_max")?)?,
            nonlinear_head: get("nonlinear_head")? == "true",
            head_hidden: get("head_hidden")?.parse().map_err(|_| Error::format("bad head_hidden"))?,
            train_rmse: parse_f(get("train_rmse")?)?,
            val_rmse: parse_f(get("val_rmse")?)?,
        };
        Ok((model, data))
    }
}

/// Fit a reward model by minimizing squared error on observed pairs plus
/// `n_negatives` sampled unobserved pairs per positive.
pub fn train_reward_model(
    records: &[InteractionRecord],
    n_users: usize,
    n_items: usize,
    reward_min: f64,
    reward_max: f64,
    cfg: &RewardModelConfig,
) -> Result<RewardModel> {
    if records.is_empty() {
        return Err(Error::data("cannot train a reward model on zero records"));
    }
    if cfg.latent_dim == 0 {
        return Err(Error::config("latent_dim must be positive"));
    }
    if cfg.epochs == 0 {
        return Err(Error::config("epochs must be positive"));
    }
    let mut rng = Rng::seed(cfg.seed);

    // Validation split.
    let mut order: Vec<usize> = (0..records.len()).collect();
    rng.shuffle(&mut order);
    let n_val = ((records.len() as f64 * cfg.val_fraction) as usize).min(records.len() - 1);
    let (val_ix, train_ix) = order.split_at(n_val);
    let train_set: Vec<InteractionRecord> = train_ix.iter().map(|&i| records[i]).collect();
    let val_set: Vec<InteractionRecord> = val_ix.iter().map(|&i| records[i]).collect();

    let mut observed: Vec<HashSet<usize>> = vec![HashSet::new(); n_users];
    for r in records {
        if r.user_id >= n_users || r.item_id >= n_items {
            return Err(Error::contract("record id out of range"));
        }
        observed[r.user_id].insert(r.item_id);
    }
    let neg_target = cfg.negative_target.unwrap_or(reward_min);

    let mut model = RewardModel {
        params: RewardModel::build_params(
            n_users,
            n_items,
            cfg.latent_dim,
            cfg.nonlinear_head,
            cfg.head_hidden,
            cfg.seed,
        ),
        n_users,
        n_items,
        latent_dim: cfg.latent_dim,
        reward_min,
        reward_max,
        nonlinear_head: cfg.nonlinear_head,
        head_hidden: cfg.head_hidden,
        train_rmse: f64::NAN,
        val_rmse: f64::NAN,
    };
    let mut opt = Optimizer::adam(cfg.lr)?;

    for _epoch in 0..cfg.epochs {
        // Epoch sample list: positives plus freshly sampled negatives.
        let mut samples: Vec<(usize, usize, f64)> = Vec::with_capacity(train_set.len() * (1 + cfg.n_negatives));
        for r in &train_set {
            samples.push((r.user_id, r.item_id, r.reward));
            for _ in 0..cfg.n_negatives {
                // Rejection-sample an unobserved item; give up after a few
                // tries on near-dense rows.
                for _try in 0..20 {
                    let j = rng.below(n_items);
                    if !observed[r.user_id].contains(&j) {
                        samples.push((r.user_id, j, neg_target));
                        break;
                    }
                }
            }
        }
        rng.shuffle(&mut samples);
        for chunk in samples.chunks(cfg.batch_size.max(1)) {
            train_batch(&mut model, &mut opt, chunk, cfg)?;
        }
    }

    fn rmse(model: &RewardModel, set: &[InteractionRecord]) -> f64 {
        if set.is_empty() {
            return f64::NAN;
        }
        let se: f64 = set
            .iter()
            .map(|r| {
                let p = model
                    .predict_raw(r.user_id, r.item_id)
                    .clamp(model.reward_min, model.reward_max);
                (p - r.reward) * (p - r.reward)
            })
            .sum();
        (se / set.len() as f64).sqrt()
    }
    model.train_rmse = rmse(&model, &train_set);
    model.val_rmse = rmse(&model, &val_set);
    Ok(model)
}

fn train_batch(
    model: &mut RewardModel,
    opt: &mut Optimizer,
    batch: &[(usize, usize, f64)],
    cfg: &RewardModelConfig,
) -> Result<()> {
    let n = batch.len();
    let users: Vec<usize> = batch.iter().map(|s| s.0).collect();
    let items: Vec<usize> = batch.iter().map(|s| s.1).collect();
    let targets: Vec<f64> = batch.iter().map(|s| s.2).collect();

    let mut tape = Tape::new();
    let bound = tape.bind(&model.params);
    let ue = tape.gather_rows(bound.get("user_emb")?, &users)?;
    let ie = tape.gather_rows(bound.get("item_emb")?, &items)?;
    let prod = tape.mul(ue, ie)?;
    let dots = tape.row_sums(prod)?;
    let mut pred = tape.reshape(dots, vec![n, 1])?;
    let ub = tape.gather_rows(bound.get("user_bias")?, &users)?;
    let ib = tape.gather_rows(bound.get("item_bias")?, &items)?;
    pred = tape.add(pred, ub)?;
    pred = tape.add(pred, ib)?;
    pred = tape.add(pred, bound.get("global_bias")?)?;
    if model.nonlinear_head {
        let both = tape.concat_cols(ue, ie)?;
        let h = linear(&mut tape, &bound, "head1", both)?;
        let h = tape.tanh(h)?;
        let out = linear(&mut tape, &bound, "head2", h)?;
        pred = tape.add(pred, out)?;
    }
    let target = tape.constant(&Tensor::matrix(n, 1, targets)?);
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let mut loss = tape.mean_all(sq)?;
    if cfg.l2 > 0.0 {
        let ue2 = tape.mul(ue, ue)?;
        let ie2 = tape.mul(ie, ie)?;
        let r1 = tape.mean_all(ue2)?;
        let r2 = tape.mean_all(ie2)?;
        let reg = tape.add(r1, r2)?;
        let reg = tape.affine(reg, cfg.l2, 0.0)?;
        loss = tape.add(loss, reg)?;
    }
    tape.backward(loss)?;
    model.params.zero_grads();
    tape.harvest(&bound, &mut model.params)?;
    opt.step(&mut model.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn constant_records(n_users: usize, n_items: usize, c: f64) -> Vec<InteractionRecord> {
        let mut out = Vec::new();
        for u in 0..n_users {
            for i in 0..n_items {
                out.push(InteractionRecord { user_id: u, item_id: i, reward: c, timestamp: i as i64 });
            }
        }
        out
    }

    #[test]
    fn zero_model_predicts_global_bias() {
        let model = RewardModel {
            params: {
                let mut p = RewardModel::build_params(3, 4, 2, false, 0, 1);
                // zero out the embeddings, set the global bias
                for name in ["user_emb", "item_emb"] {
                    let t = p.get_mut(name).unwrap();
                    for v in t.values_mut() {
                        *v = 0.0;
                    }
                }
                p.get_mut("global_bias").unwrap().values_mut()[0] = 2.5;
                p
            },
            n_users: 3,
            n_items: 4,
            latent_dim: 2,
            reward_min: 0.0,
            reward_max: 5.0,
            nonlinear_head: false,
            head_hidden: 0,
            train_rmse: 0.0,
            val_rmse: 0.0,
        };
        for u in 0..3 {
            for i in 0..4 {
                assert_eq!(model.predict(u, i).unwrap(), 2.5);
            }
        }
        assert!(model.predict(3, 0).is_err());
    }

    #[test]
    fn predictions_are_clipped_to_range() {
        let mut model = RewardModel {
            params: RewardModel::build_params(1, 1, 1, false, 0, 1),
            n_users: 1,
            n_items: 1,
            latent_dim: 1,
            reward_min: 1.0,
            reward_max: 5.0,
            nonlinear_head: false,
            head_hidden: 0,
            train_rmse: 0.0,
            val_rmse: 0.0,
        };
        model.params.get_mut("global_bias").unwrap().values_mut()[0] = 100.0;
        assert_eq!(model.predict(0, 0).unwrap(), 5.0);
        model.params.get_mut("global_bias").unwrap().values_mut()[0] = -100.0;
        assert_eq!(model.predict(0, 0).unwrap(), 1.0);
    }

    #[test]
    fn constant_data_without_negatives_fits_constant() {
        let records = constant_records(5, 6, 3.0);
        let cfg = RewardModelConfig { latent_dim: 2, epochs: 60, lr: 0.05, ..Default::default() };
        let model = train_reward_model(&records, 5, 6, 1.0, 5.0, &cfg).unwrap();
        for u in 0..5 {
            for i in 0..6 {
                assert!((model.predict(u, i).unwrap() - 3.0).abs() < 0.05);
            }
        }
    }

    /// Data generated from a known low-rank model; the generator is the
    /// oracle for held-out accuracy.
    #[test]
    fn rank_one_synthetic_reaches_low_validation_rmse() {
        let synth = generate_synthetic(&SynthConfig {
            n_users: 20,
            n_items: 15,
            rank: 1,
            noise: 0.0,
            density: 0.8,
            test_fraction: 0.2,
            seed: 7,
            ..Default::default()
        })
        .unwrap();
        let ds = &synth.dataset;
        let cfg = RewardModelConfig { latent_dim: 2, epochs: 200, lr: 0.05, ..Default::default() };
        let model =
            train_reward_model(&ds.train, ds.n_users, ds.catalog.n_items, ds.reward_min, ds.reward_max, &cfg)
                .unwrap();
        assert!(model.val_rmse < 0.05, "validation rmse {}", model.val_rmse);

        // On observed test pairs, at least 95% within 0.1 of the truth.
        let close = ds
            .test
            .iter()
            .filter(|r| (model.predict(r.user_id, r.item_id).unwrap() - r.reward).abs() < 0.1)
            .count();
        assert!(close as f64 >= 0.95 * ds.test.len() as f64, "{close}/{}", ds.test.len());
    }

    /// More negative samples push unobserved-pair predictions down.
    #[test]
    fn negatives_lower_unobserved_predictions() {
        let synth = generate_synthetic(&SynthConfig {
            n_users: 15,
            n_items: 20,
            rank: 2,
            noise: 0.1,
            density: 0.3,
            test_fraction: 0.0,
            exposure_bias: 1.0,
            seed: 11,
            ..Default::default()
        })
        .unwrap();
        // Held-out unobserved pairs.
        let mut observed = HashSet::new();
        for r in &synth.dataset.train {
            observed.insert((r.user_id, r.item_id));
        }
        let mut probe = Vec::new();
        for u in 0..15 {
            for i in 0..20 {
                if !observed.contains(&(u, i)) {
                    probe.push((u, i));
                }
            }
        }
        let mean_pred = |n_negatives: usize| -> f64 {
            let cfg = RewardModelConfig {
                latent_dim: 4,
                epochs: 80,
                lr: 0.05,
                n_negatives,
                val_fraction: 0.0,
                seed: 3,
                ..Default::default()
            };
            let model = train_reward_model(&synth.dataset.train, 15, 20, 1.0, 5.0, &cfg).unwrap();
            probe.iter().map(|&(u, i)| model.predict(u, i).unwrap()).sum::<f64>() / probe.len() as f64
        };
        let at0 = mean_pred(0);
        let at5 = mean_pred(5);
        assert!(at5 < at0, "negatives should lower unobserved predictions: {at0} -> {at5}");
    }

    #[test]
    fn save_load_roundtrip_preserves_predictions() {
        let records = constant_records(4, 4, 2.0);
        let cfg = RewardModelConfig { latent_dim: 2, epochs: 5, ..Default::default() };
        let model = train_reward_model(&records, 4, 4, 1.0, 5.0, &cfg).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m.ckpt");
        model.save(&path, &[]).unwrap();
        let (loaded, _) = RewardModel::load(&path).unwrap();
        for u in 0..4 {
            for i in 0..4 {
                assert_eq!(
                    model.predict(u, i).unwrap().to_bits(),
                    loaded.predict(u, i).unwrap().to_bits()
                );
            }
        }
    }

    #[test]
    fn config_validation() {
        let records = constant_records(2, 2, 1.0);
        let bad = RewardModelConfig { latent_dim: 0, ..Default::default() };
        assert!(train_reward_model(&records, 2, 2, 0.0, 1.0, &bad).is_err());
        assert!(train_reward_model(&[], 2, 2, 0.0, 1.0, &RewardModelConfig::default()).is_err());
    }
}
