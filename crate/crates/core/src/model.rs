//! Network components: feature extractor, domain discriminator, prototype
//! bank, bilinear interaction classifier, similarity, and pseudo-labeling.
//!
//! All forward passes are recorded on a [`Tape`]; parameters live in a
//! [`ParamStore`] and are bound to tape leaves per batch through [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{DropoutMode, GradMap, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Input feature width: 62 channels x 5 frequency bands.
pub const INPUT_DIM: usize = 310;
/// First hidden layer width of both MLPs.
pub const HIDDEN_DIM: usize = 128;
/// Latent feature width produced by the extractor.
pub const LATENT_DIM: usize = 64;

/// Per-batch binding of a parameter store to a fresh tape. Parameters bind
/// lazily on first use; frozen parameters bind as constants.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    vars: BTreeMap<String, Var>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph { tape: Tape::new(), store, vars: BTreeMap::new() }
    }

    /// Tape leaf for a named parameter.
    pub fn var(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let v = self.store.tape_var(&mut self.tape, name)?;
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.tape.constant(m)
    }

    /// Backward from `loss` and gradients for every bound unfrozen parameter.
    pub fn backward(&mut self, loss: Var) -> Result<GradMap> {
        self.tape.backward(loss)?;
        Ok(self.store.collect_grads(&self.tape, &self.vars))
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// Insert extractor parameters: 310 -> 128 -> ReLU -> 64 -> ReLU -> 64.
/// Uniform fan-in initialization.
pub fn init_extractor(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let layers =
        [(INPUT_DIM, HIDDEN_DIM, "1"), (HIDDEN_DIM, LATENT_DIM, "2"), (LATENT_DIM, LATENT_DIM, "3")];
    for (fan_in, fan_out, tag) in layers {
        let bound = 1.0 / (fan_in as f64).sqrt();
        store.insert(format!("fe.w{tag}"), uniform_init(rng, fan_in, fan_out, bound));
        store.insert(format!("fe.b{tag}"), uniform_init(rng, 1, fan_out, bound));
    }
}

/// Insert discriminator parameters: 64 -> 128 -> ReLU -> dropout -> 64 -> 1 -> sigmoid.
pub fn init_discriminator(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let layers =
        [(LATENT_DIM, HIDDEN_DIM, "1"), (HIDDEN_DIM, LATENT_DIM, "2"), (LATENT_DIM, 1, "3")];
    for (fan_in, fan_out, tag) in layers {
        let bound = 1.0 / (fan_in as f64).sqrt();
        store.insert(format!("disc.v{tag}"), uniform_init(rng, fan_in, fan_out, bound));
        store.insert(format!("disc.c{tag}"), uniform_init(rng, 1, fan_out, bound));
    }
}

/// Insert a bilinear classifier matrix theta under `<name>.theta`, drawn
/// uniformly from [-range, range].
pub fn init_classifier(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, range: f64) {
    store.insert(format!("{name}.theta"), uniform_init(rng, LATENT_DIM, LATENT_DIM, range));
}

/// Insert a plain linear C-way head for the pointwise baseline.
pub fn init_linear_head(store: &mut ParamStore, rng: &mut ChaCha8Rng, classes: usize) {
    let bound = 1.0 / (LATENT_DIM as f64).sqrt();
    store.insert("head.w", uniform_init(rng, LATENT_DIM, classes, bound));
    store.insert("head.b", uniform_init(rng, 1, classes, bound));
}

/// f(X): two ReLU layers then a linear output layer, n x 310 -> n x 64.
pub fn extract_features(g: &mut Graph, x: Var) -> Result<Var> {
    if g.tape.value(x).cols() != INPUT_DIM {
        return Err(Error::Dim(format!(
            "extract_features: expected width {INPUT_DIM}, got {}",
            g.tape.value(x).cols()
        )));
    }
    let (w1, b1, w2, b2, w3, b3) = (
        g.var("fe.w1")?,
        g.var("fe.b1")?,
        g.var("fe.w2")?,
        g.var("fe.b2")?,
        g.var("fe.w3")?,
        g.var("fe.b3")?,
    );
    let t = &mut g.tape;
    let h = t.matmul(x, w1)?;
    let h = t.add_row(h, b1)?;
    let h = t.relu(h);
    let h = t.matmul(h, w2)?;
    let h = t.add_row(h, b2)?;
    let h = t.relu(h);
    let h = t.matmul(h, w3)?;
    t.add_row(h, b3)
}

/// D(F): domain probability per row, in (0, 1). Dropout is active only in
/// train mode and draws its mask from `rng`.
pub fn discriminate(
    g: &mut Graph,
    f: Var,
    dropout_p: f64,
    mode: DropoutMode,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if g.tape.value(f).cols() != LATENT_DIM {
        return Err(Error::Dim(format!(
            "discriminate: expected width {LATENT_DIM}, got {}",
            g.tape.value(f).cols()
        )));
    }
    let (v1, c1, v2, c2, v3, c3) = (
        g.var("disc.v1")?,
        g.var("disc.c1")?,
        g.var("disc.v2")?,
        g.var("disc.c2")?,
        g.var("disc.v3")?,
        g.var("disc.c3")?,
    );
    let t = &mut g.tape;
    let h = t.matmul(f, v1)?;
    let h = t.add_row(h, c1)?;
    let h = t.relu(h);
    let h = t.dropout(h, dropout_p, mode, rng)?;
    let h = t.matmul(h, v2)?;
    let h = t.add_row(h, c2)?;
    let o = t.matmul(h, v3)?;
    let o = t.add_row(o, c3)?;
    Ok(t.sigmoid(o))
}

/// Per-emotion prototype vectors, maintained as an exponential moving average
/// of class means of latent source features. Prototypes never receive
/// gradients; they enter every tape as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    psi: Matrix,
    momentum: f64,
    counts: Vec<u64>,
}

impl PrototypeBank {
    pub fn new(classes: usize, momentum: f64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("prototype bank needs at least one class".into()));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "prototype momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(PrototypeBank {
            psi: Matrix::zeros(classes, LATENT_DIM),
            momentum,
            counts: vec![0; classes],
        })
    }

    pub fn classes(&self) -> usize {
        self.psi.rows()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn psi(&self) -> &Matrix {
        &self.psi
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// psi_c <- m * psi_c + (1 - m) * mean(batch rows labeled c), for every
    /// class present in the batch; absent classes keep their prototype.
    pub fn update(&mut self, features: &Matrix, labels: &[u8]) -> Result<()> {
        if features.rows() != labels.len() {
            return Err(Error::Dim(format!(
                "prototype update: {} feature rows vs {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if features.cols() != self.psi.cols() {
            return Err(Error::Dim(format!(
                "prototype update: latent width {} != {}",
                features.cols(),
                self.psi.cols()
            )));
        }
        let classes = self.classes();
        let mut sums = Matrix::zeros(classes, self.psi.cols());
        let mut n = vec![0u64; classes];
        for (i, &y) in labels.iter().enumerate() {
            let c = y as usize;
            if c >= classes {
                return Err(Error::Data(format!("label {y} outside 0..{classes}")));
            }
            n[c] += 1;
            for (s, &f) in sums.row_mut(c).iter_mut().zip(features.row(i)) {
                *s += f;
            }
        }
        for c in 0..classes {
            if n[c] == 0 {
                continue;
            }
            let inv = 1.0 / n[c] as f64;
            let m = self.momentum;
            for (p, &s) in self.psi.row_mut(c).iter_mut().zip(sums.row(c)) {
                *p = m * *p + (1.0 - m) * (s * inv);
            }
            self.counts[c] += n[c];
        }
        Ok(())
    }

    /// Swap in externally computed prototypes (checkpoint restore).
    pub fn restore(psi: Matrix, momentum: f64, counts: Vec<u64>) -> Result<Self> {
        if psi.rows() != counts.len() {
            return Err(Error::Data("prototype bank: psi rows != counts length".into()));
        }
        Ok(PrototypeBank { psi, momentum, counts })
    }
}

/// Interaction matrix Gamma = F * theta * Psi^T, n x C. `theta_name` selects
/// which classifier's bilinear matrix to use (for example `cls_ada`).
pub fn interaction(g: &mut Graph, f: Var, theta_name: &str, bank: &PrototypeBank) -> Result<Var> {
    let theta = g.var(&format!("{theta_name}.theta"))?;
    let psi_t = g.constant(bank.psi().transpose());
    let t = &mut g.tape;
    let ft = t.matmul(f, theta)?;
    t.matmul(ft, psi_t)
}

/// Row-wise softmax of Gamma: class membership probabilities.
pub fn class_probs(g: &mut Graph, gamma: Var) -> Var {
    g.tape.softmax_rows(gamma)
}

/// Similarity Phi = P * P^T: entry (i, j) is the probability that samples i
/// and j carry the same label under row-independence. Symmetric, in [0, 1].
pub fn similarity(g: &mut Graph, p: Var) -> Result<Var> {
    let pt = g.tape.transpose(p);
    g.tape.matmul(p, pt)
}

/// Dual-threshold pair pseudo-labels from a similarity matrix.
///
/// Returns (mu, mask): mu=1/mask=1 above `upper`, mu=0/mask=1 below `lower`,
/// mask=0 in the uncertain band. Diagonal pairs are always confident
/// positives.
pub fn pseudo_label(phi: &Matrix, upper: f64, lower: f64) -> Result<(Matrix, Matrix)> {
    if !(0.0 <= lower && lower < upper && upper <= 1.0) {
        return Err(Error::Config(format!(
            "pseudo-label thresholds need 0 <= lower < upper <= 1, got ({lower}, {upper})"
        )));
    }
    let n = phi.rows();
    let mut mu = Matrix::zeros(n, n);
    let mut mask = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..phi.cols() {
            if i == j {
                mu.set(i, j, 1.0);
                mask.set(i, j, 1.0);
            } else if phi.at(i, j) > upper {
                mu.set(i, j, 1.0);
                mask.set(i, j, 1.0);
            } else if phi.at(i, j) < lower {
                mask.set(i, j, 1.0);
            }
        }
    }
    Ok((mu, mask))
}

/// Ground-truth pair labels for a labeled batch: mu_ij = [y_i == y_j], all
/// pairs masked in.
pub fn pair_targets_from_labels(labels: &[u8]) -> (Matrix, Matrix) {
    let n = labels.len();
    let mu = Matrix::from_fn(n, n, |i, j| if labels[i] == labels[j] { 1.0 } else { 0.0 });
    (mu, Matrix::filled(n, n, 1.0))
}

/// One-hot encode labels as an n x C matrix.
pub fn one_hot(labels: &[u8], classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        if y as usize >= classes {
            return Err(Error::Data(format!("label {y} outside 0..{classes}")));
        }
        m.set(i, y as usize, 1.0);
    }
    Ok(m)
}

/// Latent features for inference (no tape bookkeeping kept).
pub fn forward_latent(store: &ParamStore, x: &Matrix) -> Result<Matrix> {
    let mut g = Graph::new(store);
    let xv = g.constant(x.clone());
    let f = extract_features(&mut g, xv)?;
    Ok(g.tape.value(f).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use approx::assert_relative_eq;

    fn fresh_store(seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "init", 0);
        init_extractor(&mut store, &mut rng);
        init_discriminator(&mut store, &mut rng);
        init_classifier(&mut store, &mut rng, "cls", 1.0 / 8.0);
        store
    }

    #[test]
    fn zero_extractor_maps_to_zero() {
        let mut store = ParamStore::new();
        for (name, r, c) in [
            ("fe.w1", INPUT_DIM, HIDDEN_DIM),
            ("fe.b1", 1, HIDDEN_DIM),
            ("fe.w2", HIDDEN_DIM, LATENT_DIM),
            ("fe.b2", 1, LATENT_DIM),
            ("fe.w3", LATENT_DIM, LATENT_DIM),
            ("fe.b3", 1, LATENT_DIM),
        ] {
            store.insert(name, Matrix::zeros(r, c));
        }
        let f = forward_latent(&store, &Matrix::filled(3, INPUT_DIM, 1.0)).unwrap();
        assert!(f.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extractor_rows_are_batch_independent() {
        let store = fresh_store(3);
        let x2 = Matrix::from_fn(2, INPUT_DIM, |i, j| (i + 1) as f64 * (j as f64 * 0.01).sin());
        let x1 = x2.take_rows(&[0]);
        let f2 = forward_latent(&store, &x2).unwrap();
        let f1 = forward_latent(&store, &x1).unwrap();
        assert_eq!(f1.row(0), f2.row(0));
    }

    #[test]
    fn extractor_rejects_wrong_width() {
        let store = fresh_store(4);
        assert!(forward_latent(&store, &Matrix::zeros(2, 300)).is_err());
    }

    #[test]
    fn zero_discriminator_outputs_half() {
        let mut store = ParamStore::new();
        for (name, r, c) in [
            ("disc.v1", LATENT_DIM, HIDDEN_DIM),
            ("disc.c1", 1, HIDDEN_DIM),
            ("disc.v2", HIDDEN_DIM, LATENT_DIM),
            ("disc.c2", 1, LATENT_DIM),
            ("disc.v3", LATENT_DIM, 1),
            ("disc.c3", 1, 1),
        ] {
            store.insert(name, Matrix::zeros(r, c));
        }
        let mut rng = rng_for(0, "drop", 0);
        let mut g = Graph::new(&store);
        let f = g.constant(Matrix::filled(4, LATENT_DIM, 0.3));
        let p = discriminate(&mut g, f, 0.5, DropoutMode::Eval, &mut rng).unwrap();
        for &v in g.tape.value(p).as_slice() {
            assert_relative_eq!(v, 0.5);
        }
    }

    #[test]
    fn discriminator_eval_is_deterministic() {
        let store = fresh_store(9);
        let x = Matrix::from_fn(5, LATENT_DIM, |i, j| ((i * 31 + j) as f64 * 0.1).cos());
        let run = || {
            let mut rng = rng_for(1, "drop", 0);
            let mut g = Graph::new(&store);
            let f = g.constant(x.clone());
            let p = discriminate(&mut g, f, 0.5, DropoutMode::Eval, &mut rng).unwrap();
            g.tape.value(p).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn prototype_mean_momentum_zero() {
        let mut bank = PrototypeBank::new(2, 0.0).unwrap();
        // 2-dim toy embedded in the first two latent coordinates
        let mut feats = Matrix::zeros(2, LATENT_DIM);
        feats.set(0, 0, 1.0);
        feats.set(0, 1, 3.0);
        feats.set(1, 0, 3.0);
        feats.set(1, 1, 5.0);
        bank.update(&feats, &[1, 1]).unwrap();
        assert_relative_eq!(bank.psi().at(1, 0), 2.0, epsilon = 1e-12);
        assert_relative_eq!(bank.psi().at(1, 1), 4.0, epsilon = 1e-12);
        // class 0 untouched
        assert_eq!(bank.psi().row(0), Matrix::zeros(1, LATENT_DIM).row(0));
    }

    #[test]
    fn prototype_momentum_near_one_is_frozen() {
        let psi = Matrix::filled(1, LATENT_DIM, 0.4);
        let mut bank = PrototypeBank::restore(psi.clone(), 1.0 - 1e-15, vec![1]).unwrap();
        bank.update(&Matrix::filled(1, LATENT_DIM, -7.0), &[0]).unwrap();
        for (a, b) in bank.psi().as_slice().iter().zip(psi.as_slice()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn prototype_ema_converges_to_class_mean() {
        let mut bank = PrototypeBank::new(1, 0.9).unwrap();
        let mut rng = rng_for(5, "proto", 0);
        // fixed distribution around mean 1.5
        for _ in 0..100 {
            let feats = Matrix::from_fn(8, LATENT_DIM, |_, _| {
                1.5 + 0.05 * rng.random_range(-1.0..1.0)
            });
            bank.update(&feats, &[0; 8]).unwrap();
        }
        for &v in bank.psi().row(0) {
            assert!((v - 1.5).abs() / 1.5 < 0.02, "prototype {v}");
        }
    }

    #[test]
    fn interaction_identity_theta_gives_norms() {
        let mut store = ParamStore::new();
        store.insert("cls.theta", Matrix::identity(LATENT_DIM));
        let mut bank = PrototypeBank::new(2, 0.0).unwrap();
        let mut f = Matrix::zeros(1, LATENT_DIM);
        for j in 0..4 {
            f.set(0, j, (j + 1) as f64);
        }
        bank.update(&f, &[0]).unwrap();
        let norm_sq: f64 = f.row(0).iter().map(|v| v * v).sum();

        let mut g = Graph::new(&store);
        let fv = g.constant(f.clone());
        let gamma = interaction(&mut g, fv, "cls", &bank).unwrap();
        assert_relative_eq!(g.tape.value(gamma).at(0, 0), norm_sq, epsilon = 1e-12);
        // zero prototype row -> zero interaction column
        assert_eq!(g.tape.value(gamma).at(0, 1), 0.0);
    }

    #[test]
    fn interaction_matches_triple_loop() {
        let mut rng = rng_for(11, "gamma", 0);
        let mut store = ParamStore::new();
        store.insert("cls.theta", uniform_init(&mut rng, LATENT_DIM, LATENT_DIM, 0.2));
        let feats = uniform_init(&mut rng, 5, LATENT_DIM, 1.0);
        let psi = uniform_init(&mut rng, 3, LATENT_DIM, 1.0);
        let bank = PrototypeBank::restore(psi.clone(), 0.9, vec![1, 1, 1]).unwrap();

        let mut g = Graph::new(&store);
        let fv = g.constant(feats.clone());
        let gamma = interaction(&mut g, fv, "cls", &bank).unwrap();
        let got = g.tape.value(gamma);

        let theta = store.get("cls.theta").unwrap();
        for i in 0..5 {
            for c in 0..3 {
                let mut want = 0.0;
                for a in 0..LATENT_DIM {
                    for b in 0..LATENT_DIM {
                        want += feats.at(i, a) * theta.at(a, b) * psi.at(c, b);
                    }
                }
                assert_relative_eq!(got.at(i, c), want, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn class_probs_rows_sum_to_one_and_preserve_argmax() {
        let store = fresh_store(13);
        let mut g = Graph::new(&store);
        let gamma_vals = Matrix::from_vec(2, 3, vec![10.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let gamma = g.constant(gamma_vals);
        let p = class_probs(&mut g, gamma);
        let v = g.tape.value(p);
        assert!(v.at(0, 0) > 0.99);
        for i in 0..2 {
            let s: f64 = v.row(i).iter().sum();
            assert_relative_eq!(s, 1.0, epsilon = 1e-12);
        }
        for j in 0..3 {
            assert_relative_eq!(v.at(1, j), 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn similarity_one_hot_cases() {
        let store = fresh_store(17);
        let mut g = Graph::new(&store);
        let p = g.constant(Matrix::from_vec(
            3,
            3,
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        ));
        let phi = similarity(&mut g, p).unwrap();
        let v = g.tape.value(phi);
        assert_eq!(v.at(0, 1), 1.0); // same one-hot class
        assert_eq!(v.at(0, 2), 0.0); // different classes
        assert_eq!(v.at(0, 0), 1.0);
        // symmetry
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(v.at(i, j), v.at(j, i));
            }
        }
    }

    #[test]
    fn similarity_uniform_rows() {
        let store = fresh_store(19);
        let mut g = Graph::new(&store);
        let p = g.constant(Matrix::filled(2, 3, 1.0 / 3.0));
        let phi = similarity(&mut g, p).unwrap();
        assert_relative_eq!(g.tape.value(phi).at(0, 1), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn pseudo_label_rules() {
        let phi = Matrix::from_vec(2, 2, vec![1.0, 0.9, 0.9, 1.0]);
        let (mu, mask) = pseudo_label(&phi, 0.8, 0.2).unwrap();
        assert_eq!((mu.at(0, 1), mask.at(0, 1)), (1.0, 1.0));

        let phi = Matrix::from_vec(2, 2, vec![1.0, 0.1, 0.1, 1.0]);
        let (mu, mask) = pseudo_label(&phi, 0.8, 0.2).unwrap();
        assert_eq!((mu.at(0, 1), mask.at(0, 1)), (0.0, 1.0));

        let phi = Matrix::from_vec(2, 2, vec![1.0, 0.5, 0.5, 1.0]);
        let (mu, mask) = pseudo_label(&phi, 0.8, 0.2).unwrap();
        assert_eq!(mask.at(0, 1), 0.0);
        // diagonal always confident positive
        assert_eq!((mu.at(0, 0), mask.at(0, 0)), (1.0, 1.0));

        assert!(pseudo_label(&phi, 0.2, 0.8).is_err());
    }

    #[test]
    fn pseudo_label_mask_is_monotone_in_band_width() {
        let mut rng = rng_for(23, "phi", 0);
        let n = 8;
        let p = Matrix::from_fn(n, 3, |_, _| rng.random_range(0.0..1.0));
        // normalize rows to make a probability matrix
        let mut pn = p.clone();
        for i in 0..n {
            let s: f64 = pn.row(i).iter().sum();
            for v in pn.row_mut(i) {
                *v /= s;
            }
        }
        let phi = pn.matmul_transpose_b(&pn);
        let (_, mask_narrow) = pseudo_label(&phi, 0.7, 0.3).unwrap();
        let (_, mask_wide) = pseudo_label(&phi, 0.8, 0.2).unwrap();
        for (w, n_) in mask_wide.as_slice().iter().zip(mask_narrow.as_slice()) {
            assert!(w <= n_, "widening the band must only shrink the mask");
        }
    }
}
