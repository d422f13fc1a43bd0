//! Per-domain visual reprogramming layer: a structural coordinate attention,
//! a patch-wise mask producer and a learnable textural pattern. The layer is
//! prepended to a frozen backbone and carries all of a domain's input-side
//! trainable state.

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{dropout, tensor_from_f64, Conv2d, Linear, Weight};
use crate::params::ParamSet;
use crate::rng::DetRng;

/// Which domain a reprogramming layer (or classifier) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainId {
    Source,
    Target,
}

impl std::fmt::Display for DomainId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DomainId::Source => write!(f, "source"),
            DomainId::Target => write!(f, "target"),
        }
    }
}

/// Shape and hyper-parameters shared by all three sub-components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VrConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Mask producer depth (number of 3x3 conv layers).
    pub l_vr: usize,
    /// Patch exponent: masks are constant on 2^n_vr square patches.
    pub n_vr: usize,
    /// Hidden width of the mask producer.
    pub mask_hidden: usize,
    /// Dropout probability inside the mask producer.
    pub p_mask: f64,
    /// Coordinate attention bottleneck reduction ratio.
    pub reduction: usize,
}

impl VrConfig {
    pub fn patch(&self) -> usize {
        1 << self.n_vr
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_vr < 1 {
            return Err(Error::config("l_vr must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.p_mask) {
            return Err(Error::config("p_mask must be in [0, 1)"));
        }
        if self.reduction == 0 {
            return Err(Error::config("reduction ratio must be positive"));
        }
        let patch = self.patch();
        if self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::config(format!(
                "input {}x{} is not divisible by the 2^{}={} patch size; \
                 resize the input in the data pipeline (no implicit padding)",
                self.height, self.width, self.n_vr, patch
            )));
        }
        Ok(())
    }
}

/// Position-sensitive channel attention built from axis-wise pooled features.
/// Produces per-instance maps `a_h` (b, c, h, 1) and `a_w` (b, c, 1, w) whose
/// entries lie in (0, 1).
#[derive(Debug)]
pub struct CoordAttention {
    cfg: VrConfig,
    bottleneck: Conv2d, // shared 1x1 transform, c -> mid
    proj_h: Conv2d,     // mid -> c, zero-init so maps start at 0.5
    proj_w: Conv2d,     // mid -> c
    pub params: ParamSet,
}

impl CoordAttention {
    pub fn init(cfg: VrConfig, dtype: DType, dev: &Device, rng: &mut DetRng) -> Result<Self> {
        let mid = (cfg.channels / cfg.reduction).max(1);
        let mut params = ParamSet::new();
        let bottleneck = Conv2d::init(
            "bottleneck",
            cfg.channels,
            mid,
            1,
            1,
            0,
            dtype,
            dev,
            rng,
            Some(&mut params),
        )?;
        let mut zero_proj = |name: &str, params: &mut ParamSet| -> Result<Conv2d> {
            let w = Var::zeros((cfg.channels, mid, 1, 1), dtype, dev)?;
            let b = Var::zeros((cfg.channels,), dtype, dev)?;
            params.push(format!("{name}.weight"), w.clone())?;
            params.push(format!("{name}.bias"), b.clone())?;
            Ok(Conv2d {
                weight: Weight::Trainable(w),
                bias: Some(Weight::Trainable(b)),
                stride: 1,
                padding: 0,
            })
        };
        let proj_h = zero_proj("proj_h", &mut params)?;
        let proj_w = zero_proj("proj_w", &mut params)?;
        Ok(Self {
            cfg,
            bottleneck,
            proj_h,
            proj_w,
            params,
        })
    }

    /// Compute the attention maps for a batch: ((b, c, h, 1), (b, c, 1, w)).
    pub fn attention_maps(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, c, h, w) = x.dims4()?;
        self.check_shape(c, h, w)?;
        // axis-wise average pooling: along width for a_h, along height for a_w
        let pooled_h = x.mean(3)?.unsqueeze(3)?; // (b, c, h, 1)
        let pooled_w = x.mean(2)?.unsqueeze(2)?; // (b, c, 1, w)
        let a_h = candle_nn::ops::sigmoid(
            &self
                .proj_h
                .forward(&self.bottleneck.forward(&pooled_h)?.relu()?)?,
        )?;
        let a_w = candle_nn::ops::sigmoid(
            &self
                .proj_w
                .forward(&self.bottleneck.forward(&pooled_w)?.relu()?)?,
        )?;
        Ok((a_h, a_w))
    }

    /// x ⊙ a_h ⊙ a_w with broadcasting along the missing axis of each map.
    pub fn apply_with_maps(x: &Tensor, a_h: &Tensor, a_w: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_mul(a_h)?.broadcast_mul(a_w)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (a_h, a_w) = self.attention_maps(x)?;
        Self::apply_with_maps(x, &a_h, &a_w)
    }

    fn check_shape(&self, c: usize, h: usize, w: usize) -> Result<()> {
        if c != self.cfg.channels || h != self.cfg.height || w != self.cfg.width {
            return Err(Error::config(format!(
                "coord attention configured for {}x{}x{}, got {}x{}x{}",
                self.cfg.channels, self.cfg.height, self.cfg.width, c, h, w
            )));
        }
        Ok(())
    }
}

/// Fully convolutional mask producer. Emits a [0, 1] mask with the input's
/// shape that is constant on non-overlapping 2^n_vr x 2^n_vr patches.
#[derive(Debug)]
pub struct MaskProducer {
    cfg: VrConfig,
    convs: Vec<Conv2d>,
    pub params: ParamSet,
}

impl MaskProducer {
    pub fn init(cfg: VrConfig, dtype: DType, dev: &Device, rng: &mut DetRng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut widths = Vec::with_capacity(cfg.l_vr + 1);
        widths.push(cfg.channels);
        for _ in 0..cfg.l_vr.saturating_sub(1) {
            widths.push(cfg.mask_hidden);
        }
        widths.push(cfg.channels);
        let mut convs = Vec::with_capacity(cfg.l_vr);
        for i in 0..cfg.l_vr {
            convs.push(Conv2d::init(
                &format!("conv{i}"),
                widths[i],
                widths[i + 1],
                3,
                1,
                1,
                dtype,
                dev,
                rng,
                Some(&mut params),
            )?);
        }
        Ok(Self { cfg, convs, params })
    }

    /// Produce the mask. `rng` enables dropout inside the subnetwork; pass
    /// `None` for a deterministic pass.
    pub fn forward(&self, x: &Tensor, mut rng: Option<&mut DetRng>) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.cfg.channels {
            return Err(Error::config(format!(
                "mask producer expects {} channels, got {c}",
                self.cfg.channels
            )));
        }
        let patch = self.cfg.patch();
        if h % patch != 0 || w % patch != 0 {
            return Err(Error::config(format!(
                "mask producer input {h}x{w} is not divisible by the 2^{}={} patch size; \
                 resize the input in the data pipeline (no implicit padding)",
                self.cfg.n_vr, patch
            )));
        }
        let mut t = x.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            t = conv.forward(&t)?;
            if i < last {
                t = t.relu()?;
                t = dropout(&t, self.cfg.p_mask, rng.as_deref_mut())?;
            }
        }
        // patch summary: average within each patch, replicate back, squash to [0, 1]
        if patch > 1 {
            t = t.avg_pool2d(patch)?.upsample_nearest2d(h, w)?;
        }
        candle_nn::ops::sigmoid(&t).map_err(Into::into)
    }
}

/// The learnable image-shaped textural pattern, initialised to zero so the
/// freshly built layer reduces to the coordinate attention alone.
#[derive(Debug)]
pub struct TexturalPattern {
    pub pattern: Var, // (c, h, w)
    pub params: ParamSet,
}

impl TexturalPattern {
    pub fn init(cfg: VrConfig, dtype: DType, dev: &Device) -> Result<Self> {
        let pattern = Var::zeros((cfg.channels, cfg.height, cfg.width), dtype, dev)?;
        let mut params = ParamSet::new();
        params.push("pattern", pattern.clone())?;
        Ok(Self { pattern, params })
    }

    pub fn set(&self, values: Vec<f64>, cfg: &VrConfig, dtype: DType, dev: &Device) -> Result<()> {
        let t = tensor_from_f64(
            values,
            &[cfg.channels, cfg.height, cfg.width],
            dtype,
            dev,
        )?;
        self.pattern.set(&t)?;
        Ok(())
    }
}

/// Per-domain visual reprogramming layer:
/// `f(x) = coord(x) + pattern ⊙ mask(coord(x))`.
#[derive(Debug)]
pub struct VrLayer {
    pub domain: DomainId,
    pub cfg: VrConfig,
    pub coord: CoordAttention,
    pub mask: MaskProducer,
    pub pattern: TexturalPattern,
    /// All trainable parameters of this layer, prefixed by component.
    pub params: ParamSet,
}

impl VrLayer {
    pub fn init(
        domain: DomainId,
        cfg: VrConfig,
        dtype: DType,
        dev: &Device,
        rng: &mut DetRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let coord = CoordAttention::init(cfg, dtype, dev, rng)?;
        let mask = MaskProducer::init(cfg, dtype, dev, rng)?;
        let pattern = TexturalPattern::init(cfg, dtype, dev)?;
        let mut params = ParamSet::new();
        params.extend_prefixed("coord", &coord.params)?;
        params.extend_prefixed("mask", &mask.params)?;
        params.extend_prefixed("pattern", &pattern.params)?;
        Ok(Self {
            domain,
            cfg,
            coord,
            mask,
            pattern,
            params,
        })
    }

    /// Apply the layer. `rng` enables the stochastic mask (dropout); `None`
    /// gives the deterministic pass used at evaluation time.
    pub fn forward(&self, x: &Tensor, rng: Option<&mut DetRng>) -> Result<Tensor> {
        let attended = self.coord.forward(x)?;
        let mask = self.mask.forward(&attended, rng)?;
        self.compose(&attended, &mask)
    }

    /// Test hook: apply the layer with externally forced attention maps and
    /// mask instead of the learned ones.
    pub fn forward_with_parts(
        &self,
        x: &Tensor,
        a_h: &Tensor,
        a_w: &Tensor,
        mask: &Tensor,
    ) -> Result<Tensor> {
        let attended = CoordAttention::apply_with_maps(x, a_h, a_w)?;
        self.compose(&attended, mask)
    }

    fn compose(&self, attended: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let textured = mask.broadcast_mul(&self.pattern.pattern.as_tensor().unsqueeze(0)?)?;
        Ok((attended + textured)?)
    }

    /// Exact count of trainable scalars in the layer.
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use candle_core::{DType, Device};

    fn small_cfg() -> VrConfig {
        VrConfig {
            channels: 3,
            height: 16,
            width: 16,
            l_vr: 3,
            n_vr: 2,
            mask_hidden: 8,
            p_mask: 0.5,
            reduction: 8,
        }
    }

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn forced_identity_attention_preserves_input() -> Result<()> {
        let x = Tensor::rand(-1f32, 1f32, (2, 3, 4, 5), &dev())?;
        let ones_h = Tensor::ones((1, 3, 4, 1), DType::F32, &dev())?;
        let ones_w = Tensor::ones((1, 3, 1, 5), DType::F32, &dev())?;
        let y = CoordAttention::apply_with_maps(&x, &ones_h, &ones_w)?;
        let diff = (x - y)?.abs()?.flatten_all()?.max(0)?.to_scalar::<f32>()?;
        assert_eq!(diff, 0.0);
        Ok(())
    }

    #[test]
    fn forced_attention_matches_analytic_product() -> Result<()> {
        // 1-channel 2x2 input [[1,2],[3,4]], a_h = [0.5, 1]^T, a_w = [1, 0.5]
        let x = Tensor::from_vec(vec![1f32, 2.0, 3.0, 4.0], (1, 1, 2, 2), &dev())?;
        let a_h = Tensor::from_vec(vec![0.5f32, 1.0], (1, 1, 2, 1), &dev())?;
        let a_w = Tensor::from_vec(vec![1f32, 0.5], (1, 1, 1, 2), &dev())?;
        let y = CoordAttention::apply_with_maps(&x, &a_h, &a_w)?;
        let got = y.flatten_all()?.to_vec1::<f32>()?;
        assert_eq!(got, vec![0.5, 0.5, 3.0, 2.0]);
        Ok(())
    }

    #[test]
    fn attention_maps_have_open_unit_range_and_output_keeps_shape() -> Result<()> {
        let cfg = VrConfig {
            channels: 3,
            height: 32,
            width: 32,
            ..small_cfg()
        };
        let ca = CoordAttention::init(cfg, DType::F32, &dev(), &mut rng_for(1, "ca", 0))?;
        let x = Tensor::rand(-2f32, 2f32, (4, 3, 32, 32), &dev())?;
        let (a_h, a_w) = ca.attention_maps(&x)?;
        for a in [&a_h, &a_w] {
            let mn = a.flatten_all()?.min(0)?.to_scalar::<f32>()?;
            let mx = a.flatten_all()?.max(0)?.to_scalar::<f32>()?;
            assert!(mn > 0.0 && mx < 1.0, "attention outside (0,1): {mn} {mx}");
        }
        let y = ca.forward(&x)?;
        assert_eq!(y.dims(), x.dims());
        Ok(())
    }

    #[test]
    fn attention_shape_mismatch_is_a_config_error() {
        let ca = CoordAttention::init(small_cfg(), DType::F32, &dev(), &mut rng_for(1, "ca", 1))
            .unwrap();
        let x = Tensor::rand(-1f32, 1f32, (1, 3, 8, 8), &dev()).unwrap();
        assert!(matches!(ca.attention_maps(&x), Err(Error::Config(_))));
    }

    #[test]
    fn mask_is_patch_constant_in_unit_range_and_deterministic() -> Result<()> {
        let cfg = small_cfg();
        let mp = MaskProducer::init(cfg, DType::F32, &dev(), &mut rng_for(2, "mp", 0))?;
        let x = Tensor::rand(-1f32, 1f32, (2, 3, 16, 16), &dev())?;
        let m1 = mp.forward(&x, None)?;
        let m2 = mp.forward(&x, None)?;
        let diff = (&m1 - &m2)?.abs()?.flatten_all()?.max(0)?.to_scalar::<f32>()?;
        assert_eq!(diff, 0.0, "deterministic passes must agree bitwise");
        let vals = m1.flatten_all()?.to_vec1::<f32>()?;
        assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
        // patch constancy: every pixel equals its patch's top-left pixel
        let patch = cfg.patch();
        let flat = m1.flatten_all()?.to_vec1::<f32>()?;
        let (b, c, h, w) = m1.dims4()?;
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let idx = ((bi * c + ci) * h + y) * w + xx;
                        let anchor = ((bi * c + ci) * h + (y / patch) * patch) * w
                            + (xx / patch) * patch;
                        assert!((flat[idx] - flat[anchor]).abs() < 1e-7);
                    }
                }
            }
        }
        Ok(())
    }

    #[test]
    fn stochastic_masks_differ_across_seeds() -> Result<()> {
        let mp = MaskProducer::init(small_cfg(), DType::F32, &dev(), &mut rng_for(3, "mp", 0))?;
        let x = Tensor::rand(-1f32, 1f32, (1, 3, 16, 16), &dev())?;
        let m1 = mp.forward(&x, Some(&mut rng_for(10, "mask", 0)))?;
        let m2 = mp.forward(&x, Some(&mut rng_for(10, "mask", 1)))?;
        let diff = (m1 - m2)?.abs()?.flatten_all()?.max(0)?.to_scalar::<f32>()?;
        assert!(diff > 0.0);
        Ok(())
    }

    #[test]
    fn non_divisible_input_is_rejected_with_resize_hint() {
        let mp = MaskProducer::init(small_cfg(), DType::F32, &dev(), &mut rng_for(4, "mp", 0))
            .unwrap();
        let x = Tensor::rand(-1f32, 1f32, (1, 3, 15, 16), &dev()).unwrap();
        let err = mp.forward(&x, None).unwrap_err();
        assert!(err.to_string().contains("resize"));
    }

    #[test]
    fn zero_pattern_reduces_to_coord_attention() -> Result<()> {
        let layer = VrLayer::init(
            DomainId::Source,
            small_cfg(),
            DType::F32,
            &dev(),
            &mut rng_for(5, "vr", 0),
        )?;
        let x = Tensor::rand(-1f32, 1f32, (2, 3, 16, 16), &dev())?;
        let via_layer = layer.forward(&x, None)?;
        let via_coord = layer.coord.forward(&x)?;
        let diff = (via_layer - via_coord)?
            .abs()?
            .flatten_all()?
            .max(0)?
            .to_scalar::<f32>()?;
        assert_eq!(diff, 0.0);
        Ok(())
    }

    #[test]
    fn forced_unit_mask_and_attention_give_x_plus_pattern() -> Result<()> {
        let cfg = small_cfg();
        let layer = VrLayer::init(DomainId::Target, cfg, DType::F32, &dev(), &mut rng_for(6, "vr", 0))?;
        let n = cfg.channels * cfg.height * cfg.width;
        layer.pattern.set(
            (0..n).map(|i| (i % 7) as f64 * 0.1 - 0.3).collect(),
            &cfg,
            DType::F32,
            &dev(),
        )?;
        let x = Tensor::rand(-1f32, 1f32, (1, 3, 16, 16), &dev())?;
        // with unit attention and unit mask: out = x + t
        let ones_h = Tensor::ones((1, 3, 16, 1), DType::F32, &dev())?;
        let ones_w = Tensor::ones((1, 3, 1, 16), DType::F32, &dev())?;
        let mask = Tensor::ones((1, 3, 16, 16), DType::F32, &dev())?;
        let out = layer.forward_with_parts(&x, &ones_h, &ones_w, &mask)?;
        let expect = x.broadcast_add(&layer.pattern.pattern.as_tensor().unsqueeze(0)?)?;
        let diff = (out - expect)?.abs()?.flatten_all()?.max(0)?.to_scalar::<f32>()?;
        assert_eq!(diff, 0.0);
        Ok(())
    }

    #[test]
    fn domain_layers_share_no_parameter_storage() -> Result<()> {
        let cfg = small_cfg();
        let src = VrLayer::init(DomainId::Source, cfg, DType::F32, &dev(), &mut rng_for(7, "vr", 0))?;
        let tgt = VrLayer::init(DomainId::Target, cfg, DType::F32, &dev(), &mut rng_for(7, "vr", 1))?;
        let before = tgt.params.checksum()?;
        // mutate every source parameter
        for (_, var) in src.params.iter() {
            let bumped = (var.as_tensor() + 1.0)?;
            var.set(&bumped)?;
        }
        assert_eq!(tgt.params.checksum()?, before);
        Ok(())
    }

    #[test]
    fn param_count_matches_hand_summed_ledger() -> Result<()> {
        let cfg = small_cfg();
        let layer = VrLayer::init(DomainId::Source, cfg, DType::F32, &dev(), &mut rng_for(8, "vr", 0))?;
        // pattern: 3*16*16
        let pattern = 3 * 16 * 16;
        // mask: conv 3->8 (3*8*9+8), conv 8->8 (8*8*9+8), conv 8->3 (8*3*9+3)
        let mask = (3 * 8 * 9 + 8) + (8 * 8 * 9 + 8) + (8 * 3 * 9 + 3);
        // coord: bottleneck 3->1 1x1 (3+1), proj_h 1->3 (3+3), proj_w 1->3 (3+3)
        let coord = (3 + 1) + (3 + 3) + (3 + 3);
        assert_eq!(layer.param_count(), pattern + mask + coord);
        assert_eq!(layer.pattern.params.scalar_count(), pattern);
        assert_eq!(layer.mask.params.scalar_count(), mask);
        assert_eq!(layer.coord.params.scalar_count(), coord);
        Ok(())
    }

    #[test]
    fn single_conv_param_count_example() -> Result<()> {
        let mut params = ParamSet::new();
        let _conv = Conv2d::init(
            "c",
            3,
            8,
            3,
            1,
            1,
            DType::F32,
            &dev(),
            &mut rng_for(0, "c", 0),
            Some(&mut params),
        )?;
        assert_eq!(params.scalar_count(), 3 * 8 * 9 + 8);
        Ok(())
    }
}
