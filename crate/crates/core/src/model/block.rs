use super::{Builder, Graph, Group, Init, ModelConfig, TokenDims};
use crate::error::{Error, Result};
use crate::tensor::{Real, Var};

pub(super) fn register<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig, i: usize) {
    let c = cfg.embed_dim;
    let p = format!("blocks.{i}");
    b.layer_norm(&format!("{p}.norm_t"), c);
    if cfg.use_temporal_pos_embed {
        b.store
            .register(b.seed, &format!("{p}.temporal_pos"), &[cfg.max_phases, c], Group::TemporalPosition, false, Init::Normal(0.02));
    }
    b.attention(&format!("{p}.temporal"), c, c, c, Group::TemporalAttention, false);
    b.layer_norm(&format!("{p}.norm_s"), c);
    b.attention(&format!("{p}.spatial"), c, c, c, Group::SpatialAttention, true);
    b.layer_norm(&format!("{p}.norm_a"), c);
    b.linear(&format!("{p}.adapter.down"), c, cfg.adapter_bottleneck, Group::Adapter, false);
    b.linear_zero(&format!("{p}.adapter.up"), cfg.adapter_bottleneck, c, Group::Adapter);
    b.layer_norm(&format!("{p}.norm_f"), c);
    b.mlp(&format!("{p}.ffn"), c, c * cfg.mlp_ratio, c, Group::FeedForward, true);
}

/// One space-time block on tokens `[B*T, H', W', C]`: temporal attention over
/// each location's T frames, spatial attention over each frame's H'W' tokens,
/// the scaled adapter (skipped when `adapter` is false) and the feed-forward
/// layer, each pre-normalized and residual.
pub fn block_forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    i: usize,
    x: Var,
    dims: TokenDims,
    adapter: bool,
) -> Result<Var> {
    let c = cfg.embed_dim;
    let TokenDims { batch: b, phases: t, height: h, width: w } = dims;
    let expected = [b * t, h, w, c];
    if g.shape(x) != expected {
        return Err(Error::Shape(format!("block {i}: tokens {:?}, dims imply {expected:?}", g.shape(x))));
    }
    let p = format!("blocks.{i}");
    let hw = h * w;

    let x = g.tape.reshape(x, &[b, t, hw, c]);
    let x = g.tape.permute(x, &[0, 2, 1, 3]);
    let x = g.tape.reshape(x, &[b * hw, t, c]);
    g.note("temporal (BHW) x T x C", x);
    debug_assert_eq!(g.shape(x), [b * hw, t, c]);
    let mut n = g.layer_norm(&format!("{p}.norm_t"), x);
    if cfg.use_temporal_pos_embed {
        let pos = g.p(&format!("{p}.temporal_pos"));
        let pos = g.tape.narrow(pos, 0, 0, t);
        n = g.tape.add_suffix(n, pos);
    }
    let a = g.attention(&format!("{p}.temporal"), n, n, cfg.num_heads);
    let x = g.tape.add(x, a);

    let x = g.tape.reshape(x, &[b, hw, t, c]);
    let x = g.tape.permute(x, &[0, 2, 1, 3]);
    let x = g.tape.reshape(x, &[b * t, hw, c]);
    g.note("spatial (BT) x (H'W') x C", x);
    debug_assert_eq!(g.shape(x), [b * t, hw, c]);
    let n = g.layer_norm(&format!("{p}.norm_s"), x);
    let a = g.attention(&format!("{p}.spatial"), n, n, cfg.num_heads);
    let mut x = g.tape.add(x, a);

    if adapter {
        let n = g.layer_norm(&format!("{p}.norm_a"), x);
        let a = g.linear(&format!("{p}.adapter.down"), n);
        let a = g.tape.gelu(a);
        let a = g.linear(&format!("{p}.adapter.up"), a);
        let a = g.tape.scale(a, T::of(cfg.adapter_scale));
        x = g.tape.add(x, a);
    }

    let n = g.layer_norm(&format!("{p}.norm_f"), x);
    let f = g.mlp(&format!("{p}.ffn"), n);
    let x = g.tape.add(x, f);
    Ok(g.tape.reshape(x, &expected))
}
