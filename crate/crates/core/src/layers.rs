//! Parameterized building blocks shared by the encoders, fusion and decoder.

use smag_tensor::{Real, Var};

use crate::error::Result;
use crate::params::{Ctx, ParamId, ParamStore, Scope, StatsId};

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let weight = store.uniform(&scope.child("weight"), vec![cout, cin, k, k], cin * k * k);
        let bias = bias.then(|| store.constant(&scope.child("bias"), vec![cout], 0.0));
        Self { weight, bias, stride, pad }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        Ok(ctx.g.conv2d(x, w, b, self.stride, self.pad)?)
    }
}

/// Kernel-2, stride-2 up-convolution.
#[derive(Clone, Debug)]
pub struct UpConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UpConv {
    pub fn new<T: Real>(store: &mut ParamStore<T>, scope: &Scope, cin: usize, cout: usize) -> Self {
        let weight = store.uniform(&scope.child("weight"), vec![cin, cout, 2, 2], cin);
        let bias = store.constant(&scope.child("bias"), vec![cout], 0.0);
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        Ok(ctx.g.conv_transpose2d(x, w, Some(b), 2)?)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, scope: &Scope, channels: usize) -> Self {
        Self {
            gamma: store.constant(&scope.child("gamma"), vec![channels], 1.0),
            beta: store.constant(&scope.child("beta"), vec![channels], 0.0),
            stats: store.add_stats(scope, channels),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        ctx.norm(x, gamma, beta, self.stats)
    }
}
