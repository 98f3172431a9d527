//! Matrix factorization scorer `f_ui = <U_u, V_i>` and its SGD update.

use std::io::{Read, Write};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_for, Stream};

pub const DEFAULT_DIM: usize = 32;
pub const DEFAULT_INIT_STD: f64 = 0.1;

const CHECKPOINT_MAGIC: &[u8; 8] = b"MFCKPT01";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub l2: f64,
    pub seed: u64,
    pub init_std: f64,
}

impl SgdConfig {
    pub fn new(learning_rate: f64, seed: u64) -> Self {
        SgdConfig {
            learning_rate,
            l2: 0.0,
            seed,
            init_std: DEFAULT_INIT_STD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::arg(format!("l2 {} must be non-negative", self.l2)));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::arg(format!(
                "init std {} must be non-negative",
                self.init_std
            )));
        }
        Ok(())
    }
}

/// User factors (`n_users x dim`) and item factors (`n_items x dim`), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    n_users: usize,
    n_items: usize,
    dim: usize,
    seed: u64,
    users: Vec<f64>,
    items: Vec<f64>,
}

impl FactorModel {
    pub fn from_factors(
        n_users: usize,
        n_items: usize,
        dim: usize,
        seed: u64,
        users: Vec<f64>,
        items: Vec<f64>,
    ) -> Result<Self> {
        if n_users == 0 || n_items == 0 || dim == 0 {
            return Err(Error::arg("model dimensions must be positive"));
        }
        if users.len() != n_users * dim || items.len() != n_items * dim {
            return Err(Error::arg("factor payload does not match dimensions"));
        }
        if users.iter().chain(&items).any(|x| !x.is_finite()) {
            return Err(Error::arg("factors must be finite"));
        }
        Ok(FactorModel {
            n_users,
            n_items,
            dim,
            seed,
            users,
            items,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn user_factors(&self, u: usize) -> &[f64] {
        &self.users[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item_factors(&self, i: usize) -> &[f64] {
        &self.items[i * self.dim..(i + 1) * self.dim]
    }

    fn check_user(&self, user: usize) -> Result<()> {
        if user >= self.n_users {
            return Err(Error::arg(format!(
                "user {user} out of range ({})",
                self.n_users
            )));
        }
        Ok(())
    }

    fn check_items(&self, items: &[usize]) -> Result<()> {
        if let Some(&i) = items.iter().find(|&&i| i >= self.n_items) {
            return Err(Error::arg(format!(
                "item {i} out of range ({})",
                self.n_items
            )));
        }
        Ok(())
    }

    pub fn predict_scores(&self, user: usize, items: &[usize]) -> Result<Vec<f64>> {
        self.check_user(user)?;
        self.check_items(items)?;
        let uf = self.user_factors(user);
        Ok(items
            .iter()
            .map(|&i| dot(uf, self.item_factors(i)))
            .collect())
    }

    /// One SGD ascent step on the scores of `items` for `user`, given
    /// `grad[k] = dObjective/df_{user, items[k]}`.
    ///
    /// Both sides read pre-update factors:
    /// `U_u += lr * (sum_k g_k V_k - l2 U_u)` and
    /// `V_k += lr * (g_k U_u - l2 V_k)`.
    pub fn apply_score_gradients(
        &mut self,
        user: usize,
        items: &[usize],
        grad: &[f64],
        cfg: &SgdConfig,
    ) -> Result<()> {
        self.check_user(user)?;
        self.check_items(items)?;
        if grad.len() != items.len() {
            return Err(Error::arg("gradient length differs from item count"));
        }
        if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training {
                epoch: 0,
                user,
                reason: format!("non-finite score gradient for item {}", items[k]),
            });
        }
        let d = self.dim;
        let lr = cfg.learning_rate;
        let u0: Vec<f64> = self.user_factors(user).to_vec();

        let mut user_step: Vec<f64> = u0.iter().map(|x| -cfg.l2 * x).collect();
        for (&i, &g) in items.iter().zip(grad) {
            if g == 0.0 {
                continue;
            }
            for (s, v) in user_step.iter_mut().zip(self.item_factors(i)) {
                *s += g * v;
            }
        }
        for (&i, &g) in items.iter().zip(grad) {
            if g == 0.0 && cfg.l2 == 0.0 {
                continue;
            }
            let row = &mut self.items[i * d..(i + 1) * d];
            for (v, &uu) in row.iter_mut().zip(&u0) {
                *v += lr * (g * uu - cfg.l2 * *v);
            }
        }
        for (x, s) in self.users[user * d..(user + 1) * d]
            .iter_mut()
            .zip(&user_step)
        {
            *x += lr * s;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.users.iter().chain(&self.items).all(|x| x.is_finite())
    }

    /// Binary checkpoint: an 8-byte magic, then `n_users, n_items, dim, seed`
    /// as little-endian u64, then user and item factors as little-endian f64
    /// in row-major order.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [
            self.n_users as u64,
            self.n_items as u64,
            self.dim as u64,
            self.seed,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for x in self.users.iter().chain(&self.items) {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::data("not a factor model checkpoint"));
        }
        let mut word = [0u8; 8];
        let mut header = [0u64; 4];
        for h in &mut header {
            r.read_exact(&mut word)?;
            *h = u64::from_le_bytes(word);
        }
        let [m, n, d, seed] = header;
        let (m, n, d) = (m as usize, n as usize, d as usize);
        let mut read_block = |len: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(len);
            for _ in 0..len {
                r.read_exact(&mut word)?;
                out.push(f64::from_le_bytes(word));
            }
            Ok(out)
        };
        let users = read_block(m * d)?;
        let items = read_block(n * d)?;
        FactorModel::from_factors(m, n, d, seed, users, items)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gaussian(0, init_std^2) factors, deterministic in `seed`.
pub fn init_model(
    n_users: usize,
    n_items: usize,
    dim: usize,
    seed: u64,
    init_std: f64,
) -> Result<FactorModel> {
    if n_users == 0 || n_items == 0 || dim == 0 {
        return Err(Error::arg("model dimensions must be positive"));
    }
    if !(init_std.is_finite() && init_std >= 0.0) {
        return Err(Error::arg(format!(
            "init std must be finite and non-negative, got {init_std}"
        )));
    }
    let normal =
        Normal::new(0.0, init_std).map_err(|e| Error::arg(format!("init std {init_std}: {e}")))?;
    let mut rng = rng_for(seed, Stream::ModelInit, &[]);
    let users = (0..n_users * dim)
        .map(|_| normal.sample(&mut rng))
        .collect();
    let items = (0..n_items * dim)
        .map(|_| normal.sample(&mut rng))
        .collect();
    FactorModel::from_factors(n_users, n_items, dim, seed, users, items)
}
