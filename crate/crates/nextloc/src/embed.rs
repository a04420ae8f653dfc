//! Feature embeddings: per-step sums of location, time-of-day, weekday and
//! mode vectors plus a sinusoidal positional encoding, and the per-user
//! embedding vector.

use minitensor::{add, embedding_lookup, mul, Scalar, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{EncodedSample, NUM_TIME_BINS, NUM_WEEKDAYS};
use crate::model::ModelError;
use crate::train::Batch;

/// Which additive feature terms participate in the per-step sum. Disabled
/// terms have no table at all, so ablated models carry fewer parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedFlags {
    pub location: bool,
    pub temporal: bool,
    pub mode: bool,
}

impl Default for EmbedFlags {
    fn default() -> Self {
        EmbedFlags {
            location: true,
            temporal: true,
            mode: true,
        }
    }
}

/// The learned lookup tables of the embedding layer.
#[derive(Debug)]
pub struct EmbeddingTables<E: Scalar> {
    pub flags: EmbedFlags,
    pub d_model: usize,
    pub d_user: usize,
    pub location: Option<Tensor<E>>,
    pub time_of_day: Option<Tensor<E>>,
    pub weekday: Option<Tensor<E>>,
    pub mode: Option<Tensor<E>>,
    pub user: Tensor<E>,
}

fn init_table<E: Scalar>(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Tensor<E> {
    let bound = 1.0 / (dim as f64).sqrt();
    let data: Vec<E> = (0..rows * dim)
        .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::parameter(&[rows, dim], data)
}

impl<E: Scalar> EmbeddingTables<E> {
    pub fn new(
        num_locations: usize,
        num_modes: usize,
        num_users: usize,
        d_model: usize,
        d_user: usize,
        flags: EmbedFlags,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        EmbeddingTables {
            flags,
            d_model,
            d_user,
            location: flags
                .location
                .then(|| init_table(rng, num_locations, d_model)),
            time_of_day: flags.temporal.then(|| init_table(rng, NUM_TIME_BINS, d_model)),
            weekday: flags.temporal.then(|| init_table(rng, NUM_WEEKDAYS, d_model)),
            mode: flags.mode.then(|| init_table(rng, num_modes, d_model)),
            user: init_table(rng, num_users, d_user),
        }
    }

    /// Embed a padded batch: the `(B, m, d_model)` per-step sums (padded rows
    /// zeroed) and the `(B, d_user)` user embeddings.
    pub fn embed_batch(&self, batch: &Batch) -> Result<(Tensor<E>, Tensor<E>), ModelError> {
        let (b, m) = (batch.size, batch.max_len);
        let idx_shape = [b, m];
        let mut emb: Option<Tensor<E>> = None;
        let mut accumulate = |term: Tensor<E>, emb: &mut Option<Tensor<E>>| -> Result<(), ModelError> {
            *emb = Some(match emb.take() {
                None => term,
                Some(acc) => add(&acc, &term)?,
            });
            Ok(())
        };
        if let Some(table) = &self.location {
            let term = embedding_lookup(table, &batch.locations, &idx_shape)
                .map_err(|e| ModelError::OutOfVocabulary {
                    feature: "location",
                    source: e,
                })?;
            accumulate(term, &mut emb)?;
        }
        if let Some(table) = &self.time_of_day {
            let term = embedding_lookup(table, &batch.time_bins, &idx_shape).map_err(|e| {
                ModelError::OutOfVocabulary {
                    feature: "time_of_day",
                    source: e,
                }
            })?;
            accumulate(term, &mut emb)?;
        }
        if let Some(table) = &self.weekday {
            let term = embedding_lookup(table, &batch.weekdays, &idx_shape).map_err(|e| {
                ModelError::OutOfVocabulary {
                    feature: "weekday",
                    source: e,
                }
            })?;
            accumulate(term, &mut emb)?;
        }
        if let Some(table) = &self.mode {
            let term = embedding_lookup(table, &batch.modes, &idx_shape).map_err(|e| {
                ModelError::OutOfVocabulary {
                    feature: "mode",
                    source: e,
                }
            })?;
            accumulate(term, &mut emb)?;
        }
        let pe = positional_encoding::<E>(m, self.d_model)?;
        let mut emb = match emb {
            Some(acc) => add(&acc, &pe)?,
            None => {
                // all feature terms ablated away: the sum degenerates to PE
                let ones = Tensor::constant(&[b, 1, 1], vec![E::ONE; b]);
                mul(&pe.reshape(&[1, m, self.d_model])?, &ones)?
            }
        };
        // padded steps carry no signal
        let mut mask = vec![E::ONE; b * m];
        for (bi, &len) in batch.lengths.iter().enumerate() {
            for k in len..m {
                mask[bi * m + k] = E::ZERO;
            }
        }
        let mask = Tensor::constant(&[b, m, 1], mask);
        emb = mul(&emb, &mask)?;

        let user_emb = embedding_lookup(&self.user, &batch.users, &[b]).map_err(|e| {
            ModelError::OutOfVocabulary {
                feature: "user",
                source: e,
            }
        })?;
        Ok((emb, user_emb))
    }

    /// Embed one sample (window length m): the `(m, d_model)` matrix and the
    /// `(d_user,)` user vector.
    pub fn embed_sequence(
        &self,
        sample: &EncodedSample,
    ) -> Result<(Tensor<E>, Tensor<E>), ModelError> {
        let batch = Batch::single(sample);
        let (emb, user) = self.embed_batch(&batch)?;
        Ok((
            emb.reshape(&[batch.max_len, self.d_model])
                .map_err(ModelError::Tensor)?,
            user.reshape(&[self.d_user]).map_err(ModelError::Tensor)?,
        ))
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        if let Some(t) = &self.location {
            out.push(("embed.location".to_string(), t.clone()));
        }
        if let Some(t) = &self.time_of_day {
            out.push(("embed.time_of_day".to_string(), t.clone()));
        }
        if let Some(t) = &self.weekday {
            out.push(("embed.weekday".to_string(), t.clone()));
        }
        if let Some(t) = &self.mode {
            out.push(("embed.mode".to_string(), t.clone()));
        }
        out.push(("embed.user".to_string(), self.user.clone()));
        out
    }
}

/// The sinusoidal positional encoding: even dims carry `sin(pos / 10000^(2i/d))`,
/// odd dims the matching cosine. Position is the within-window step, starting
/// at zero for every sample.
pub fn positional_encoding<E: Scalar>(seq_len: usize, d_model: usize) -> Result<Tensor<E>, ModelError> {
    if d_model % 2 != 0 {
        return Err(ModelError::BadConfig {
            field: "d_model",
            msg: format!("positional encoding needs an even width, got {d_model}"),
        });
    }
    let mut data = vec![E::ZERO; seq_len * d_model];
    for pos in 0..seq_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = E::from_f64(angle.sin());
            data[pos * d_model + 2 * i + 1] = E::from_f64(angle.cos());
        }
    }
    Ok(Tensor::constant(&[seq_len, d_model], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use minitensor::sum_all;

    #[test]
    fn positional_encoding_examples() {
        let pe = positional_encoding::<f64>(4, 6).unwrap();
        let v = pe.to_vec();
        // position 0: even dims 0, odd dims 1
        for i in 0..3 {
            assert_eq!(v[2 * i], 0.0);
            assert_eq!(v[2 * i + 1], 1.0);
        }
        // position 1, dim 0: sin(1)
        assert!((v[6] - 0.841471).abs() < 1e-6);
        // everything in [-1, 1]
        assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
        // odd width rejected
        assert!(positional_encoding::<f64>(4, 5).is_err());
    }

    fn sample(locations: Vec<u32>, modes: Vec<u8>) -> EncodedSample {
        let m = locations.len();
        EncodedSample {
            user: 0,
            locations,
            time_bins: vec![3; m],
            weekdays: vec![2; m],
            modes,
            target_location: 0,
            target_mode: 0,
            target_time: "2023-01-02T08:00:00+00:00".into(),
            split: crate::data::Split::Train,
        }
    }

    fn zeroed_tables(d: usize) -> EmbeddingTables<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tables =
            EmbeddingTables::<f64>::new(5, 7, 3, d, 2, EmbedFlags::default(), &mut rng);
        for t in [
            tables.location.as_ref().unwrap(),
            tables.time_of_day.as_ref().unwrap(),
            tables.weekday.as_ref().unwrap(),
            tables.mode.as_ref().unwrap(),
        ] {
            t.update_value(|v| v.fill(0.0));
        }
        tables
    }

    #[test]
    fn zero_tables_reduce_to_the_positional_encoding() {
        let tables = zeroed_tables(4);
        let s = sample(vec![1, 2, 4], vec![0, 3, 6]);
        let (emb, _) = tables.embed_sequence(&s).unwrap();
        let pe = positional_encoding::<f64>(3, 4).unwrap();
        assert_eq!(emb.to_vec(), pe.to_vec());
    }

    #[test]
    fn single_step_window_sums_the_four_rows_plus_pe() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tables =
            EmbeddingTables::<f64>::new(5, 7, 3, 4, 2, EmbedFlags::default(), &mut rng);
        let s = sample(vec![2], vec![5]);
        let (emb, user) = tables.embed_sequence(&s).unwrap();
        assert_eq!(emb.shape(), &[1, 4]);
        assert_eq!(user.shape(), &[2]);
        let loc = &tables.location.as_ref().unwrap().to_vec()[2 * 4..3 * 4];
        let tod = &tables.time_of_day.as_ref().unwrap().to_vec()[3 * 4..4 * 4];
        let dow = &tables.weekday.as_ref().unwrap().to_vec()[2 * 4..3 * 4];
        let md = &tables.mode.as_ref().unwrap().to_vec()[5 * 4..6 * 4];
        let pe = positional_encoding::<f64>(1, 4).unwrap().to_vec();
        for i in 0..4 {
            let expected = loc[i] + tod[i] + dow[i] + md[i] + pe[i];
            assert!((emb.to_vec()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn changing_one_mode_changes_only_that_row_by_the_table_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tables =
            EmbeddingTables::<f64>::new(5, 7, 3, 4, 2, EmbedFlags::default(), &mut rng);
        let a = sample(vec![1, 2, 3], vec![0, 1, 2]);
        let mut b = a.clone();
        b.modes[1] = 6;
        let (ea, _) = tables.embed_sequence(&a).unwrap();
        let (eb, _) = tables.embed_sequence(&b).unwrap();
        let table = tables.mode.as_ref().unwrap().to_vec();
        let (va, vb) = (ea.to_vec(), eb.to_vec());
        for k in 0..3 {
            for i in 0..4 {
                let diff = vb[k * 4 + i] - va[k * 4 + i];
                let expected = if k == 1 {
                    table[6 * 4 + i] - table[4 + i]
                } else {
                    0.0
                };
                assert!((diff - expected).abs() < 1e-12, "step {k} dim {i}");
            }
        }
    }

    #[test]
    fn scaling_the_mode_table_scales_its_contribution_linearly() {
        let tables = zeroed_tables(4);
        tables
            .mode
            .as_ref()
            .unwrap()
            .update_value(|v| v.iter_mut().enumerate().for_each(|(i, x)| *x = i as f64));
        let s = sample(vec![1, 2], vec![3, 4]);
        let (e1, _) = tables.embed_sequence(&s).unwrap();
        let pe = positional_encoding::<f64>(2, 4).unwrap().to_vec();
        let contrib1: Vec<f64> = e1.to_vec().iter().zip(&pe).map(|(a, b)| a - b).collect();
        tables
            .mode
            .as_ref()
            .unwrap()
            .update_value(|v| v.iter_mut().for_each(|x| *x *= 2.5));
        let (e2, _) = tables.embed_sequence(&s).unwrap();
        let contrib2: Vec<f64> = e2.to_vec().iter().zip(&pe).map(|(a, b)| a - b).collect();
        for (c1, c2) in contrib1.iter().zip(&contrib2) {
            assert!((c2 - 2.5 * c1).abs() < 1e-9);
        }
    }

    #[test]
    fn ablation_flags_drop_tables_entirely() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let flags = EmbedFlags {
            location: true,
            temporal: false,
            mode: false,
        };
        let tables = EmbeddingTables::<f64>::new(5, 7, 3, 4, 2, flags, &mut rng);
        assert!(tables.time_of_day.is_none());
        assert!(tables.weekday.is_none());
        assert!(tables.mode.is_none());
        assert_eq!(tables.named_tensors().len(), 2); // location + user
        let s = sample(vec![1, 2], vec![3, 4]);
        let (emb, _) = tables.embed_sequence(&s).unwrap();
        assert_eq!(emb.shape(), &[2, 4]);
    }

    #[test]
    fn embedding_rows_only_get_gradient_when_their_index_occurs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tables =
            EmbeddingTables::<f64>::new(5, 7, 3, 4, 2, EmbedFlags::default(), &mut rng);
        let s = sample(vec![1, 2], vec![3, 4]);
        let (emb, _) = tables.embed_sequence(&s).unwrap();
        sum_all(&emb).backward().unwrap();
        let grad = tables.location.as_ref().unwrap().grad().unwrap();
        for row in 0..5 {
            let used = row == 1 || row == 2;
            let nonzero = grad[row * 4..(row + 1) * 4].iter().any(|&g| g != 0.0);
            assert_eq!(nonzero, used, "row {row}");
        }
    }
}
