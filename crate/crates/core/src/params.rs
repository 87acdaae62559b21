/// A collection of named dense parameter tensors, visited in a fixed order.
///
/// The optimizer, gradient accumulation and finite-difference checks all walk
/// parameters through this trait, so the visit order must be stable for a
/// given shape.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// Copies every tensor into one flat vector, in visit order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, t| out.extend_from_slice(t));
        out
    }

    fn tensor_lens(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t.len()));
        out
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |_, t| t.fill(value));
    }

    fn scale(&mut self, factor: f64) {
        self.visit_mut(&mut |_, t| t.iter_mut().for_each(|x| *x *= factor));
    }

    fn squared_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |_, t| s += t.iter().map(|x| x * x).sum::<f64>());
        s
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.iter().all(|x| x.is_finite()));
        ok
    }
}

/// Adds `src` into `dst` tensor by tensor. Both must share a shape.
pub(crate) fn accumulate<P: ParamSet>(dst: &mut P, src: &P) {
    let flat = src.flatten();
    let mut offset = 0;
    dst.visit_mut(&mut |_, t| {
        let len = t.len();
        for (d, s) in t.iter_mut().zip(&flat[offset..offset + len]) {
            *d += s;
        }
        offset += len;
    });
}
