//! Parameter allocation shared by the network plans.

use crate::dropout::DropoutSpec;
use crate::tensor::{xavier_init, zeros, BnStats, Parameter, Tensor};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ConvDesc {
    pub kernel: usize,
    pub bias: Option<usize>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct BnDesc {
    pub gamma: usize,
    pub beta: usize,
    pub stats: usize,
}

/// One dropout site, resolved from the model's [`DropoutSpec`].
/// Regular/variational act on activations after a conv; targeted acts on
/// the conv weights themselves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum DropoutSite {
    None,
    Regular { p: f32 },
    Variational { log_alpha: usize },
    Targeted { gamma: f32, p: f32 },
}

pub(crate) struct Builder<'r> {
    params: Vec<Parameter>,
    bn_stats: Vec<BnStats>,
    bn_names: Vec<String>,
    rng: &'r mut Rng,
    dropout: DropoutSpec,
}

impl<'r> Builder<'r> {
    pub fn new(rng: &'r mut Rng, dropout: DropoutSpec) -> Self {
        Builder { params: Vec::new(), bn_stats: Vec::new(), bn_names: Vec::new(), rng, dropout }
    }

    fn push(&mut self, name: String, value: Tensor) -> usize {
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    pub fn conv(
        &mut self,
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> ConvDesc {
        let kernel = self.push(format!("{name}.weight"), xavier_init(&[cout, cin, k, k], self.rng));
        let bias = bias.then(|| self.push(format!("{name}.bias"), zeros(&[cout])));
        ConvDesc { kernel, bias, stride, pad }
    }

    /// Transposed-conv kernel laid out `[Cin, Cout, k, k]`.
    pub fn tconv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> usize {
        self.push(format!("{name}.weight"), xavier_init(&[cin, cout, k, k], self.rng))
    }

    pub fn bn(&mut self, name: &str, channels: usize) -> BnDesc {
        let gamma =
            self.push(format!("{name}.gamma"), Tensor::new(vec![channels], vec![1.0; channels]));
        let beta = self.push(format!("{name}.beta"), zeros(&[channels]));
        self.bn_stats.push(BnStats::new(channels));
        self.bn_names.push(name.to_string());
        BnDesc { gamma, beta, stats: self.bn_stats.len() - 1 }
    }

    /// Instantiates the model-wide dropout spec at one site.
    pub fn dropout_site(&mut self, name: &str) -> DropoutSite {
        match self.dropout {
            DropoutSpec::Regular { p } if p > 0.0 => DropoutSite::Regular { p },
            DropoutSpec::Regular { .. } => DropoutSite::None,
            DropoutSpec::Variational { log_alpha_init, .. } => {
                let idx = self
                    .push(format!("{name}.log_alpha"), Tensor::scalar(log_alpha_init));
                DropoutSite::Variational { log_alpha: idx }
            }
            DropoutSpec::Targeted { gamma, p } => DropoutSite::Targeted { gamma, p },
        }
    }

    pub fn param_shape(&self, idx: usize) -> &[usize] {
        &self.params[idx].value.shape
    }

    pub fn finish(self) -> (Vec<Parameter>, Vec<BnStats>, Vec<String>) {
        (self.params, self.bn_stats, self.bn_names)
    }
}
