//! Parameter and MAC profiling.
//!
//! MACs are analytic, per image, for one forward pass: convolutions count
//! `Cout*Cin*kh*kw*H'*W'`, position-wise linears `in*out` per token, and the
//! attention mixers their leading-term costs per head. Elementwise work
//! (activations, norms, softmax normalizers, bias adds) is excluded.

use crate::attention::AttentionKind;
use crate::error::Result;
use crate::model::{CxvModel, ModelConfig, Variant, CONV_SUBLAYER_KERNEL};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct ProfileRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone)]
pub struct ProfileReport {
    pub rows: Vec<ProfileRow>,
    pub param_total: u64,
    pub mac_total: u64,
}

impl ProfileReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<24} {:>12} {:>16}\n", "module", "params", "macs"));
        for row in &self.rows {
            s.push_str(&format!(
                "{:<24} {:>12} {:>16}\n",
                row.name, row.params, row.macs
            ));
        }
        s.push_str(&format!(
            "{:<24} {:>12} {:>16}\n",
            "total", self.param_total, self.mac_total
        ));
        s.push_str(&format!(
            "params {:.3} M, macs {:.3} G\n",
            self.param_total as f64 / 1e6,
            self.mac_total as f64 / 1e9
        ));
        s
    }
}

/// Total trainable scalar count.
pub fn count_params<E: Scalar>(model: &CxvModel<E>) -> u64 {
    model
        .named_params()
        .iter()
        .map(|(_, t)| t.numel() as u64)
        .sum()
}

fn conv_macs(c_out: usize, c_in: usize, k: usize, h_out: usize, w_out: usize) -> u64 {
    (c_out * c_in * k * k * h_out * w_out) as u64
}

/// Per-head mixing MACs of one attention invocation over `n` tokens.
fn mechanism_macs(kind: AttentionKind, n: usize, dh: usize, m: usize, iters: usize) -> u64 {
    match kind {
        // scores q.k^T plus attn.v
        AttentionKind::SoftmaxOracle => (2 * n * n * dh) as u64,
        // build phi(K)^T V plus apply phi(Q)
        AttentionKind::LinearTransformer | AttentionKind::PerformerRelu => {
            (2 * n * dh * dh) as u64
        }
        // landmark kernels plus the Newton-Schulz pseudoinverse
        AttentionKind::Nystromformer => (n * m * dh + m * m * dh + iters * m * m * m) as u64,
    }
}

/// Analytic MAC count for one forward pass at `(h, w)` input resolution.
pub fn count_macs(cfg: &ModelConfig, input_hw: (usize, usize)) -> u64 {
    profile_at(cfg, input_hw, None).mac_total
}

/// Per-module breakdown with exact parameter counts from the built model.
pub fn profile<E: Scalar>(model: &CxvModel<E>) -> ProfileReport {
    profile_at(
        &model.cfg,
        (model.cfg.in_h, model.cfg.in_w),
        Some(&model.named_params().iter().map(|(n, t)| (n.clone(), t.numel() as u64)).collect::<Vec<_>>()),
    )
}

fn params_for(prefix: &str, table: Option<&Vec<(String, u64)>>, analytic: u64) -> u64 {
    match table {
        Some(rows) => rows
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, c)| c)
            .sum(),
        None => analytic,
    }
}

fn profile_at(
    cfg: &ModelConfig,
    input_hw: (usize, usize),
    param_table: Option<&Vec<(String, u64)>>,
) -> ProfileReport {
    let d = cfg.model_dim();
    let heads = cfg.heads();
    let dh = d / heads;
    let mut rows = Vec::new();

    // embedding ladder
    let (mut h, mut w) = input_hw;
    let mut c_in = cfg.in_channels;
    for (i, &c_out) in cfg.embed_channels.iter().enumerate() {
        h = (h + 2 * cfg.embed_pad - cfg.embed_kernel) / cfg.embed_stride + 1;
        w = (w + 2 * cfg.embed_pad - cfg.embed_kernel) / cfg.embed_stride + 1;
        rows.push(ProfileRow {
            name: format!("embed.{i}"),
            params: params_for(
                &format!("embed.{i}."),
                param_table,
                (c_out * c_in * cfg.embed_kernel * cfg.embed_kernel + c_out) as u64,
            ),
            macs: conv_macs(c_out, c_in, cfg.embed_kernel, h, w),
        });
        c_in = c_out;
    }
    let n = h * w;

    for i in 0..cfg.layers {
        if cfg.variant == Variant::Cxv {
            rows.push(ProfileRow {
                name: format!("layers.{i}.conv"),
                params: params_for(
                    &format!("layers.{i}.conv."),
                    param_table,
                    (d * d * CONV_SUBLAYER_KERNEL * CONV_SUBLAYER_KERNEL + d) as u64,
                ),
                macs: conv_macs(d, d, CONV_SUBLAYER_KERNEL, h, w),
            });
        }
        rows.push(ProfileRow {
            name: format!("layers.{i}.norm"),
            params: params_for(&format!("layers.{i}.norm."), param_table, 2 * d as u64),
            macs: 0,
        });
        // four d->d projections count as position-wise linears
        let proj = (4 * n * d * d) as u64;
        let mix = heads as u64
            * mechanism_macs(
                cfg.attention.kind,
                n,
                dh,
                cfg.attention.landmarks,
                cfg.attention.pinv_iterations,
            );
        rows.push(ProfileRow {
            name: format!("layers.{i}.attn"),
            params: params_for(
                &format!("layers.{i}.attn."),
                param_table,
                (4 * (d * d + d)) as u64,
            ),
            macs: proj + mix,
        });
        rows.push(ProfileRow {
            name: format!("layers.{i}.mlp"),
            params: params_for(
                &format!("layers.{i}.mlp."),
                param_table,
                (d * cfg.mlp_dim + cfg.mlp_dim + cfg.mlp_dim * d + d) as u64,
            ),
            macs: (2 * n * d * cfg.mlp_dim) as u64,
        });
    }

    rows.push(ProfileRow {
        name: "head".into(),
        params: params_for("head.", param_table, (d * cfg.classes + cfg.classes) as u64),
        macs: (d * cfg.classes) as u64,
    });

    let param_total = rows.iter().map(|r| r.params).sum();
    let mac_total = rows.iter().map(|r| r.macs).sum();
    ProfileReport {
        rows,
        param_total,
        mac_total,
    }
}

/// Sanity handle used by tests: analytic params must equal the built model's.
pub fn analytic_param_count(cfg: &ModelConfig) -> Result<u64> {
    cfg.validate()?;
    Ok(profile_at(cfg, (cfg.in_h, cfg.in_w), None).param_total)
}
