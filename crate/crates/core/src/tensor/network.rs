//! Encoder-decoder networks with optional skip connections and
//! classification heads.
//!
//! Encoder stage 0 is a stride-1 3x3 convolution; every further stage
//! halves each spatial extent with a stride-2 convolution. Decoder stages
//! mirror the encoder: nearest-neighbour upsample, convolution, optional
//! concatenation with the same-extent encoder stage, merge convolution.
//! A 1x1 convolution + sigmoid produces the restoration. Heads pool the
//! deepest encoder stage globally and apply fully connected layers.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::Tape;
use super::{file, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub name: String,
    /// Width of the hidden layer; 0 means a single linear layer.
    pub hidden: usize,
    pub classes: usize,
    /// Feed the flattened deepest feature map instead of its spatial mean.
    #[serde(default)]
    pub flatten: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Spatial extents of the input, `[h, w]` or `[d, h, w]`.
    pub input_extent: Vec<usize>,
    pub in_channels: usize,
    /// Channel count of each encoder stage.
    pub widths: Vec<usize>,
    /// 3x3 convolutions per encoder stage; the first one downsamples.
    pub convs_per_stage: usize,
    pub decoder: bool,
    pub skips: bool,
    pub out_channels: usize,
    pub heads: Vec<HeadSpec>,
}

/// One entry of a network's ordered topology.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv {
        name: String,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    },
    Upsample {
        factor: usize,
    },
    /// Concatenates encoder stage `stage` onto the decoder path.
    Concat {
        stage: usize,
        extent: Vec<usize>,
    },
    GlobalAvgPool,
    Flatten,
    Dense {
        name: String,
        fin: usize,
        fout: usize,
    },
    Relu,
    Sigmoid,
    Softmax,
}

impl NetworkSpec {
    pub fn spatial_rank(&self) -> usize {
        self.input_extent.len()
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let rank = self.spatial_rank();
        if rank != 2 && rank != 3 {
            return Err(Error::config(format!(
                "network input must have 2 or 3 spatial axes, got {:?}",
                self.input_extent
            )));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::config("encoder widths must be non-empty and positive"));
        }
        if self.convs_per_stage == 0 {
            return Err(Error::config("encoder stages need at least one convolution"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("input channels must be positive"));
        }
        let div = 1usize << (self.depth() - 1);
        for &e in &self.input_extent {
            if e == 0 || e % div != 0 {
                return Err(Error::config(format!(
                    "{} encoder stages need input extents divisible by {div}, got {:?}",
                    self.depth(),
                    self.input_extent
                )));
            }
        }
        if self.skips && !self.decoder {
            return Err(Error::config("skip connections require a decoder"));
        }
        if self.decoder && self.out_channels == 0 {
            return Err(Error::config("decoder output channels must be positive"));
        }
        let mut names = std::collections::BTreeSet::new();
        for h in &self.heads {
            if h.classes < 2 {
                return Err(Error::config(format!(
                    "head `{}` needs at least 2 classes, got {}",
                    h.name, h.classes
                )));
            }
            if h.name.is_empty() || h.name.contains(|c: char| c.is_whitespace() || c == '.') {
                return Err(Error::config(format!("invalid head name `{}`", h.name)));
            }
            if !names.insert(h.name.as_str()) {
                return Err(Error::config(format!("duplicate head `{}`", h.name)));
            }
        }
        Ok(())
    }

    /// Spatial extents of every encoder stage.
    pub fn stage_extents(&self) -> Vec<Vec<usize>> {
        (0..self.depth())
            .map(|i| self.input_extent.iter().map(|e| e >> i).collect())
            .collect()
    }

    /// Input channels of decoder stage `i`'s merge convolution.
    pub fn merge_in_channels(&self, i: usize) -> usize {
        if self.skips {
            2 * self.widths[i]
        } else {
            self.widths[i]
        }
    }

    pub fn head(&self, name: &str) -> Option<&HeadSpec> {
        self.heads.iter().find(|h| h.name == name)
    }

    pub fn topology(&self) -> Vec<Layer> {
        let mut t = Vec::new();
        let mut ch = self.in_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            t.push(Layer::Conv {
                name: format!("enc{i}"),
                cin: ch,
                cout: w,
                kernel: 3,
                stride: if i == 0 { 1 } else { 2 },
            });
            t.push(Layer::Relu);
            for j in 1..self.convs_per_stage {
                t.push(Layer::Conv {
                    name: format!("enc{i}.{j}"),
                    cin: w,
                    cout: w,
                    kernel: 3,
                    stride: 1,
                });
                t.push(Layer::Relu);
            }
            ch = w;
        }
        if self.decoder {
            let extents = self.stage_extents();
            for i in (0..self.depth() - 1).rev() {
                t.push(Layer::Upsample { factor: 2 });
                t.push(Layer::Conv {
                    name: format!("dec{i}.up"),
                    cin: ch,
                    cout: self.widths[i],
                    kernel: 3,
                    stride: 1,
                });
                t.push(Layer::Relu);
                if self.skips {
                    t.push(Layer::Concat {
                        stage: i,
                        extent: extents[i].clone(),
                    });
                }
                t.push(Layer::Conv {
                    name: format!("dec{i}.merge"),
                    cin: self.merge_in_channels(i),
                    cout: self.widths[i],
                    kernel: 3,
                    stride: 1,
                });
                t.push(Layer::Relu);
                ch = self.widths[i];
            }
            t.push(Layer::Conv {
                name: "out".into(),
                cin: ch,
                cout: self.out_channels,
                kernel: 1,
                stride: 1,
            });
            t.push(Layer::Sigmoid);
        }
        let deepest = *self.widths.last().unwrap();
        let flat = deepest * self.stage_extents().last().unwrap().iter().product::<usize>();
        for h in &self.heads {
            let fin = if h.flatten { flat } else { deepest };
            t.push(if h.flatten {
                Layer::Flatten
            } else {
                Layer::GlobalAvgPool
            });
            if h.hidden > 0 {
                t.push(Layer::Dense {
                    name: format!("head.{}.fc1", h.name),
                    fin,
                    fout: h.hidden,
                });
                t.push(Layer::Relu);
                t.push(Layer::Dense {
                    name: format!("head.{}.fc2", h.name),
                    fin: h.hidden,
                    fout: h.classes,
                });
            } else {
                t.push(Layer::Dense {
                    name: format!("head.{}.fc", h.name),
                    fin,
                    fout: h.classes,
                });
            }
            t.push(Layer::Softmax);
        }
        t
    }

    /// `(name, shape, fan_in)` of every weight and bias.
    fn param_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        let k = vec![3; self.spatial_rank()];
        let one = vec![1; self.spatial_rank()];
        let mut out = Vec::new();
        let conv = |out: &mut Vec<(String, Vec<usize>, usize)>, name: String, cin: usize, cout: usize, ks: &[usize]| {
            let mut shape = vec![cout, cin];
            shape.extend_from_slice(ks);
            let fan_in = cin * ks.iter().product::<usize>();
            out.push((format!("{name}.weight"), shape, fan_in));
            out.push((format!("{name}.bias"), vec![cout], fan_in));
        };
        for layer in self.topology() {
            match layer {
                Layer::Conv {
                    name,
                    cin,
                    cout,
                    kernel,
                    ..
                } => conv(&mut out, name, cin, cout, if kernel == 3 { &k } else { &one }),
                Layer::Dense { name, fin, fout } => {
                    out.push((format!("{name}.weight"), vec![fout, fin], fin));
                    out.push((format!("{name}.bias"), vec![fout], fin));
                }
                _ => {}
            }
        }
        out
    }
}

/// Parameters bound onto a tape for one step.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Moves the gradients of bound parameters into a name-keyed map.
    pub fn gradients<S: Scalar>(&self, grads: &mut super::Gradients<S>) -> BTreeMap<String, Tensor<S>> {
        self.vars
            .iter()
            .filter_map(|(n, v)| grads.take(*v).map(|g| (n.clone(), g)))
            .collect()
    }
}

/// Handles to the intermediate and final activations of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Outputs {
    pub stages: Vec<Var>,
    pub restoration: Option<Var>,
    pub head_probs: BTreeMap<String, Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<S: Scalar> {
    spec: NetworkSpec,
    params: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Network<S> {
    /// He-uniform weights, zero biases. Each parameter draws from its own
    /// stream derived from `(seed, name)`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape, fan_in) in spec.param_shapes() {
            params.insert(name.clone(), init_param(&name, &shape, fan_in, seed));
        }
        Ok(Network { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<S>> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("enc")
    }

    pub fn is_head_param(name: &str) -> bool {
        name.starts_with("head.")
    }

    /// Registers every parameter on `tape`; names for which `trainable`
    /// returns false become constants.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(n, t)| {
                let v = if trainable(n) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Records a forward pass. The decoder runs only if `decoder` is set
    /// and the network has one; only the listed heads are evaluated.
    pub fn forward(&self, tape: &mut Tape<S>, bound: &Bound, x: Var, decoder: bool, heads: &[&str]) -> Result<Outputs> {
        let xs = tape.value(x).shape().to_vec();
        let mut expect = vec![xs.first().copied().unwrap_or(0), self.spec.in_channels];
        expect.extend_from_slice(&self.spec.input_extent);
        if xs != expect {
            return Err(Error::config(format!(
                "network expects input [batch, {}, {:?}], got {xs:?}",
                self.spec.in_channels, self.spec.input_extent
            )));
        }
        let mut out = Outputs::default();
        let mut h = x;
        for i in 0..self.spec.depth() {
            let stride = if i == 0 { 1 } else { 2 };
            let c = tape.conv(
                h,
                bound.var(&format!("enc{i}.weight"))?,
                bound.var(&format!("enc{i}.bias"))?,
                stride,
                1,
            )?;
            h = tape.relu(c)?;
            for j in 1..self.spec.convs_per_stage {
                let c = tape.conv(
                    h,
                    bound.var(&format!("enc{i}.{j}.weight"))?,
                    bound.var(&format!("enc{i}.{j}.bias"))?,
                    1,
                    1,
                )?;
                h = tape.relu(c)?;
            }
            out.stages.push(h);
        }
        if decoder && self.spec.decoder {
            let mut d = h;
            for i in (0..self.spec.depth() - 1).rev() {
                let u = tape.upsample(d, 2)?;
                let c = tape.conv(
                    u,
                    bound.var(&format!("dec{i}.up.weight"))?,
                    bound.var(&format!("dec{i}.up.bias"))?,
                    1,
                    1,
                )?;
                d = tape.relu(c)?;
                if self.spec.skips {
                    d = tape.concat(d, out.stages[i])?;
                }
                let m = tape.conv(
                    d,
                    bound.var(&format!("dec{i}.merge.weight"))?,
                    bound.var(&format!("dec{i}.merge.bias"))?,
                    1,
                    1,
                )?;
                d = tape.relu(m)?;
            }
            let o = tape.conv(d, bound.var("out.weight")?, bound.var("out.bias")?, 1, 0)?;
            out.restoration = Some(tape.sigmoid(o)?);
        }
        if !heads.is_empty() {
            let mut pooled = None;
            let mut flat = None;
            for &name in heads {
                let spec = self
                    .spec
                    .head(name)
                    .ok_or_else(|| Error::config(format!("network has no head `{name}`")))?;
                let pooled = if spec.flatten {
                    match flat {
                        Some(v) => v,
                        None => *flat.insert(tape.flatten(h)?),
                    }
                } else {
                    match pooled {
                        Some(v) => v,
                        None => *pooled.insert(tape.global_avg_pool(h)?),
                    }
                };
                let logits = if spec.hidden > 0 {
                    let a = tape.dense(
                        pooled,
                        bound.var(&format!("head.{name}.fc1.weight"))?,
                        bound.var(&format!("head.{name}.fc1.bias"))?,
                    )?;
                    let a = tape.relu(a)?;
                    tape.dense(
                        a,
                        bound.var(&format!("head.{name}.fc2.weight"))?,
                        bound.var(&format!("head.{name}.fc2.bias"))?,
                    )?
                } else {
                    tape.dense(
                        pooled,
                        bound.var(&format!("head.{name}.fc.weight"))?,
                        bound.var(&format!("head.{name}.fc.bias"))?,
                    )?
                };
                out.head_probs.insert(name.to_string(), tape.softmax(logits)?);
            }
        }
        Ok(out)
    }

    /// Replaces (or adds) head `spec.name` with freshly initialized weights.
    pub fn with_fresh_head(&self, head: HeadSpec, seed: u64) -> Result<Self> {
        let mut spec = self.spec.clone();
        spec.heads.retain(|h| h.name != head.name);
        spec.heads.push(head.clone());
        self.rebuilt(spec, seed, |n| n.starts_with(&format!("head.{}.", head.name)))
    }

    pub fn without_heads(&self) -> Result<Self> {
        let mut spec = self.spec.clone();
        spec.heads.clear();
        self.rebuilt(spec, 0, |_| false)
    }

    /// Drops the decoder and skips, keeping encoder and heads.
    pub fn without_decoder(&self) -> Result<Self> {
        let mut spec = self.spec.clone();
        spec.decoder = false;
        spec.skips = false;
        self.rebuilt(spec, 0, |_| false)
    }

    /// Replaces the final 1x1 convolution with a fresh one of `channels` outputs.
    pub fn with_fresh_output(&self, channels: usize, seed: u64) -> Result<Self> {
        let mut spec = self.spec.clone();
        spec.out_channels = channels;
        self.rebuilt(spec, seed, |n| n.starts_with("out."))
    }

    fn rebuilt(&self, spec: NetworkSpec, seed: u64, fresh: impl Fn(&str) -> bool) -> Result<Self> {
        spec.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape, fan_in) in spec.param_shapes() {
            let t = match self.params.get(&name) {
                Some(t) if !fresh(&name) && t.shape() == shape.as_slice() => t.clone(),
                Some(_) if !fresh(&name) => return Err(Error::config(format!("parameter `{name}` changes shape"))),
                _ => init_param(&name, &shape, fan_in, seed),
            };
            params.insert(name, t);
        }
        Ok(Network { spec, params })
    }

    /// Checks that this network's encoder accepts inputs of `extent`.
    pub fn check_input(&self, extent: &[usize]) -> Result<()> {
        if self.spec.input_extent != extent {
            return Err(Error::config(format!(
                "checkpoint topology expects input {:?}, task provides {extent:?}",
                self.spec.input_extent
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self, extra_meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
        let mut meta = extra_meta.clone();
        meta.insert("topology".into(), serde_json::to_string(&self.spec)?);
        let list: Vec<(&str, &Tensor<S>)> = self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        file::encode(&meta, &list)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, BTreeMap<String, String>)> {
        let (header, tensors) = file::decode::<S>(bytes)?;
        let topo = header
            .meta
            .get("topology")
            .ok_or_else(|| Error::integrity("checkpoint lacks a topology entry"))?;
        let spec: NetworkSpec = serde_json::from_str(topo)?;
        spec.validate()?;
        let params: BTreeMap<String, Tensor<S>> = tensors.into_iter().collect();
        let expected = spec.param_shapes();
        if expected.len() != params.len()
            || expected
                .iter()
                .any(|(n, s, _)| params.get(n).map(|t| t.shape() != s.as_slice()).unwrap_or(true))
        {
            return Err(Error::integrity("checkpoint parameters do not match its topology"));
        }
        let mut meta = header.meta;
        meta.remove("topology");
        Ok((Network { spec, params }, meta))
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        crate::artifact::write_atomic(path, &self.to_bytes(meta)?)
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        Self::from_bytes(&crate::artifact::read(path)?)
    }

    /// SHA-256 of the metadata-free checkpoint encoding.
    pub fn digest(&self) -> String {
        seed::sha256_hex(&self.to_bytes(&BTreeMap::new()).expect("valid network encodes"))
    }
}

fn init_param<S: Scalar>(name: &str, shape: &[usize], fan_in: usize, seed: u64) -> Tensor<S> {
    if name.ends_with(".bias") {
        return Tensor::zeros(shape);
    }
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = seed::derived_rng(seed, &format!("init:{name}"), 0);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Stacks single-channel grids into `[batch, 1, spatial...]`.
pub fn batch_from_grids<S: Scalar>(grids: &[&Grid]) -> Result<Tensor<S>> {
    let first = grids.first().ok_or_else(|| Error::usage("cannot batch zero grids"))?;
    let sp = first.spatial_shape();
    let mut data = Vec::with_capacity(grids.len() * first.len());
    for g in grids {
        if g.spatial_shape() != sp {
            return Err(Error::usage("grids in a batch must share one shape"));
        }
        data.extend(g.data().iter().map(|&v| S::from_f64(v as f64)));
    }
    let mut shape = vec![grids.len(), 1];
    shape.extend(sp);
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_spec(heads: Vec<HeadSpec>) -> NetworkSpec {
        NetworkSpec {
            convs_per_stage: 1,
            input_extent: vec![8, 8],
            in_channels: 1,
            widths: vec![2, 3, 4],
            decoder: true,
            skips: true,
            out_channels: 1,
            heads,
        }
    }

    #[test]
    fn forward_shapes_match_contract() {
        let spec = small_spec(vec![HeadSpec {
            name: "vw".into(),
            hidden: 5,
            classes: 7,
            flatten: false,
        }]);
        let net = Network::<f64>::new(spec, 1).unwrap();
        let mut tape = Tape::new();
        let b = net.bind(&mut tape, |_| true);
        let x = tape.constant(Tensor::full(&[3, 1, 8, 8], 0.5));
        let o = net.forward(&mut tape, &b, x, true, &["vw"]).unwrap();
        assert_eq!(tape.value(o.restoration.unwrap()).shape(), &[3, 1, 8, 8]);
        assert_eq!(tape.value(o.head_probs["vw"]).shape(), &[3, 7]);
        assert_eq!(tape.value(o.stages[2]).shape(), &[3, 4, 2, 2]);
    }

    #[test]
    fn skips_join_equal_extents() {
        let spec = small_spec(vec![]);
        let extents = spec.stage_extents();
        let mut decoder_extent = extents.last().unwrap().clone();
        for layer in spec.topology() {
            match layer {
                Layer::Upsample { factor } => decoder_extent = decoder_extent.iter().map(|e| e * factor).collect(),
                Layer::Concat { stage, extent } => {
                    assert_eq!(extent, extents[stage]);
                    assert_eq!(extent, decoder_extent);
                }
                _ => {}
            }
        }
    }

    #[test]
    fn removing_skips_halves_merge_inputs() {
        let with = small_spec(vec![]);
        let mut without = with.clone();
        without.skips = false;
        for i in 0..2 {
            assert_eq!(with.merge_in_channels(i), 2 * with.widths[i]);
            assert_eq!(without.merge_in_channels(i), with.widths[i]);
        }
        let a = Network::<f32>::new(with, 0).unwrap();
        let b = Network::<f32>::new(without, 0).unwrap();
        assert_eq!(a.params()["dec0.merge.weight"].shape(), &[2, 4, 3, 3]);
        assert_eq!(b.params()["dec0.merge.weight"].shape(), &[2, 2, 3, 3]);
    }

    #[test]
    fn indivisible_extent_is_config_error() {
        let mut spec = small_spec(vec![]);
        spec.input_extent = vec![6, 8];
        assert!(matches!(Network::<f32>::new(spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn save_load_reproduces_outputs_bit_exactly() {
        let spec = small_spec(vec![HeadSpec {
            name: "vw".into(),
            hidden: 4,
            classes: 3,
            flatten: false,
        }]);
        let net = Network::<f32>::new(spec, 9).unwrap();
        let bytes = net.to_bytes(&BTreeMap::new()).unwrap();
        let (back, _) = Network::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        let run = |n: &Network<f32>| {
            let mut tape = Tape::new();
            let b = n.bind(&mut tape, |_| false);
            let x = tape.constant(
                Tensor::from_f64(
                    vec![1, 1, 8, 8],
                    &(0..64).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>(),
                )
                .unwrap(),
            );
            let o = n.forward(&mut tape, &b, x, true, &["vw"]).unwrap();
            (
                tape.value(o.restoration.unwrap()).clone(),
                tape.value(o.head_probs["vw"]).clone(),
            )
        };
        assert_eq!(run(&net), run(&back));
    }

    #[test]
    fn fresh_head_keeps_encoder() {
        let net = Network::<f32>::new(small_spec(vec![]), 3).unwrap();
        let h = net
            .with_fresh_head(
                HeadSpec {
                    name: "task".into(),
                    hidden: 0,
                    classes: 2,
                    flatten: false,
                },
                5,
            )
            .unwrap();
        assert_eq!(h.params()["enc1.weight"], net.params()["enc1.weight"]);
        assert_eq!(h.params()["head.task.fc.weight"].shape(), &[2, 4]);
    }
}
