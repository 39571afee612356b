//! Flat access to parameter groups, shared by optimizers, checkpoints and
//! gradient checks.

/// A bag of named `f64` tensors that can be walked in a fixed order.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, s| n += s.len());
        n
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |_, s| s.fill(value));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }

    fn group_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |name, _| names.push(name.to_string()));
        names
    }

    /// Copies of every group, in visiting order.
    fn to_groups(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, s| out.push((name.to_string(), s.to_vec())));
        out
    }
}

/// `self += scale * other`, group by group. Both sides must share a layout.
pub fn add_scaled<P: Parameters>(target: &mut P, scale: f64, other: &P) {
    let mut flat = Vec::new();
    other.visit(&mut |_, s| flat.push(s.to_vec()));
    let mut it = flat.into_iter();
    target.visit_mut(&mut |_, s| {
        let src = it.next().expect("parameter layouts differ");
        assert_eq!(src.len(), s.len(), "parameter layouts differ");
        for (t, v) in s.iter_mut().zip(src) {
            *t += scale * v;
        }
    });
}

/// Reads or writes the `index`-th scalar of group `group`.
pub fn scalar_mut<P: Parameters>(p: &mut P, group: usize, index: usize, update: impl FnOnce(&mut f64)) {
    let mut g = 0;
    let mut update = Some(update);
    p.visit_mut(&mut |_, s| {
        if g == group {
            if let Some(u) = update.take() {
                u(&mut s[index]);
            }
        }
        g += 1;
    });
}

pub fn scalar<P: Parameters>(p: &P, group: usize, index: usize) -> f64 {
    let mut g = 0;
    let mut out = f64::NAN;
    p.visit(&mut |_, s| {
        if g == group {
            out = s[index];
        }
        g += 1;
    });
    out
}

/// Group sizes in visiting order.
pub fn group_sizes<P: Parameters>(p: &P) -> Vec<usize> {
    let mut out = Vec::new();
    p.visit(&mut |_, s| out.push(s.len()));
    out
}
