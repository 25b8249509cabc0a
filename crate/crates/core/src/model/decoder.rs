use super::{Builder, Graph, Group, Init, ModelConfig, TokenDims};
use crate::error::{Error, Result};
use crate::tensor::{Real, Var};

pub(super) fn register<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) {
    let c = cfg.embed_dim;
    b.store.register(b.seed, "decoder.output_token", &[1, c], Group::DecoderTokens, false, Init::Normal(1.0));
    for j in 0..cfg.decoder_depth {
        let p = format!("decoder.twoway.{j}");
        b.attention(&format!("{p}.self_attn"), c, c, c, Group::DecoderAttention, false);
        b.layer_norm(&format!("{p}.norm1"), c);
        b.attention(&format!("{p}.token_to_image"), c, c, c, Group::DecoderAttention, false);
        b.layer_norm(&format!("{p}.norm2"), c);
        b.mlp(&format!("{p}.mlp"), c, 2 * c, c, Group::DecoderAttention, false);
        b.layer_norm(&format!("{p}.norm3"), c);
        b.attention(&format!("{p}.image_to_token"), c, c, c, Group::DecoderAttention, false);
        b.layer_norm(&format!("{p}.norm4"), c);
    }
    let mut cin = c;
    for s in (0..cfg.stages()).rev() {
        let cs = cfg.encoder_channels[s];
        let p = format!("decoder.up{s}");
        b.conv(&format!("{p}.conv1"), cin + cs, cs, 3, Group::DecoderConv);
        b.conv(&format!("{p}.conv2"), cs, cs, 3, Group::DecoderConv);
        b.layer_norm(&format!("{p}.norm_q"), cs);
        b.layer_norm(&format!("{p}.norm_kv"), cs);
        b.attention(&format!("{p}.mhca"), cs, cs, cs, Group::SkipAttention, false);
        cin = cs;
    }
    b.mlp("decoder.head", c, c, cfg.encoder_channels[0], Group::Head, false);
}

/// `[N, C, H, W]` → `[N, H*W, C]`.
fn to_tokens<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let s = g.shape(x);
    let x = g.tape.permute(x, &[0, 2, 3, 1]);
    g.tape.reshape(x, &[s[0], s[2] * s[3], s[1]])
}

/// Decodes tokens `[B*T, H', W', C]` to logits `[B, 1, H, W, T]`. `prompt`
/// holds `[B*T, P, C]` prompt tokens, or `None` for the prompt-free variant.
pub fn decoder_forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    tokens: Var,
    skips: &[Var],
    prompt: Option<Var>,
    dims: TokenDims,
) -> Result<Var> {
    let c = cfg.embed_dim;
    let frames = dims.batch * dims.phases;
    let (h0, w0) = (dims.height, dims.width);
    if g.shape(tokens) != [frames, h0, w0, c] {
        return Err(Error::Shape(format!("decoder tokens {:?} vs dims {dims:?}", g.shape(tokens))));
    }
    if skips.len() != cfg.stages() {
        return Err(Error::Shape(format!("{} skips for {} stages", skips.len(), cfg.stages())));
    }
    for (s, skip) in skips.iter().enumerate() {
        let want = [frames, cfg.encoder_channels[s], h0 << (cfg.stages() - s), w0 << (cfg.stages() - s)];
        if g.shape(*skip) != want {
            return Err(Error::Shape(format!("skip {s} is {:?}, tokens imply {want:?}", g.shape(*skip))));
        }
    }

    let mut img = g.tape.reshape(tokens, &[frames, h0 * w0, c]);
    let out = g.p("decoder.output_token");
    let out = g.tape.expand_leading(out, frames);
    let out = g.tape.reshape(out, &[frames, 1, c]);
    let mut q = match prompt {
        Some(p) => {
            let ps = g.shape(p);
            if ps.len() != 3 || ps[0] != frames || ps[2] != c {
                return Err(Error::Shape(format!("prompt tokens {ps:?}, expected [{frames}, P, {c}]")));
            }
            g.tape.concat(&[out, p], 1)
        }
        None => out,
    };
    for j in 0..cfg.decoder_depth {
        let p = format!("decoder.twoway.{j}");
        let a = g.attention(&format!("{p}.self_attn"), q, q, cfg.decoder_heads);
        let s = g.tape.add(q, a);
        q = g.layer_norm(&format!("{p}.norm1"), s);
        let a = g.attention(&format!("{p}.token_to_image"), q, img, cfg.decoder_heads);
        let s = g.tape.add(q, a);
        q = g.layer_norm(&format!("{p}.norm2"), s);
        let m = g.mlp(&format!("{p}.mlp"), q);
        let s = g.tape.add(q, m);
        q = g.layer_norm(&format!("{p}.norm3"), s);
        let a = g.attention(&format!("{p}.image_to_token"), img, q, cfg.decoder_heads);
        let s = g.tape.add(img, a);
        img = g.layer_norm(&format!("{p}.norm4"), s);
    }

    let x = g.tape.reshape(img, &[frames, h0, w0, c]);
    let mut x = g.tape.permute(x, &[0, 3, 1, 2]);
    for s in (0..cfg.stages()).rev() {
        let p = format!("decoder.up{s}");
        let skip = skips[s];
        let up = g.tape.upsample(x, 2);
        let cat = g.tape.concat(&[up, skip], 1);
        let f = g.conv(&format!("{p}.conv1"), cat);
        let f = g.tape.gelu(f);
        let f = g.conv(&format!("{p}.conv2"), f);
        let f = g.tape.gelu(f);

        let fs = g.shape(f);
        let (cs, h, w) = (fs[1], fs[2], fs[3]);
        let mut k = 1;
        while h / k > cfg.mhca_kv_grid && w / k > cfg.mhca_kv_grid && h % (2 * k) == 0 && w % (2 * k) == 0 {
            k *= 2;
        }
        let kv = if k > 1 { g.tape.avg_pool(skip, k) } else { skip };
        let kv = to_tokens(g, kv);
        let kv = g.layer_norm(&format!("{p}.norm_kv"), kv);
        let qt = to_tokens(g, f);
        let qt = g.layer_norm(&format!("{p}.norm_q"), qt);
        let a = g.attention(&format!("{p}.mhca"), qt, kv, cfg.decoder_heads);
        let a = g.tape.reshape(a, &[frames, h, w, cs]);
        let a = g.tape.permute(a, &[0, 3, 1, 2]);
        x = g.tape.add(f, a);
    }

    let (h, w) = (h0 << cfg.stages(), w0 << cfg.stages());
    let c0 = cfg.encoder_channels[0];
    let t = g.tape.narrow(q, 1, 0, 1);
    let v = g.mlp("decoder.head", t);
    let fmap = g.tape.reshape(x, &[frames, c0, h * w]);
    let logits = g.tape.matmul(v, fmap, false, false);
    let logits = g.tape.reshape(logits, &[dims.batch, dims.phases, h, w]);
    let logits = g.tape.permute(logits, &[0, 2, 3, 1]);
    let logits = g.tape.reshape(logits, &[dims.batch, 1, h, w, dims.phases]);
    g.note("logits B x 1 x H x W x T", logits);
    Ok(logits)
}
