use super::{BatchDims, Builder, Graph, Group, ModelConfig, TokenDims};
use crate::error::Result;
use crate::tensor::{Real, Var};

pub(super) fn register<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) {
    let mut cin = cfg.in_channels;
    for (i, &c) in cfg.encoder_channels.iter().enumerate() {
        b.conv(&format!("encoder.stage{i}.conv1"), cin, c, 3, Group::Encoder);
        b.conv(&format!("encoder.stage{i}.conv2"), c, c, 3, Group::Encoder);
        cin = c;
    }
    b.conv("encoder.proj", cin, cfg.embed_dim, 1, Group::Encoder);
}

/// Folds time into the batch, runs the downsampling stages and projects to
/// token width. Returns tokens `[B*T, H', W', C_e]` and the pre-pooling
/// feature map of every stage.
pub fn encoder_forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    images: Var,
    dims: BatchDims,
) -> Result<(Var, Vec<Var>, TokenDims)> {
    cfg.check_geometry(dims.height, dims.width, dims.phases)?;
    let x = g.tape.permute(images, &[0, 4, 1, 2, 3]);
    let mut x = g.tape.reshape(x, &[dims.frames(), cfg.in_channels, dims.height, dims.width]);
    g.note("encoder input (BT) x C x H x W", x);
    let mut skips = Vec::with_capacity(cfg.stages());
    for i in 0..cfg.stages() {
        x = g.conv(&format!("encoder.stage{i}.conv1"), x);
        x = g.tape.gelu(x);
        x = g.conv(&format!("encoder.stage{i}.conv2"), x);
        x = g.tape.gelu(x);
        g.note("encoder skip", x);
        skips.push(x);
        x = g.tape.avg_pool(x, 2);
    }
    let x = g.conv("encoder.proj", x);
    let s = g.shape(x);
    let tdims = TokenDims { batch: dims.batch, phases: dims.phases, height: s[2], width: s[3] };
    let tokens = g.tape.permute(x, &[0, 2, 3, 1]);
    g.note("tokens (BT) x H' x W' x C", tokens);
    Ok((tokens, skips, tdims))
}
