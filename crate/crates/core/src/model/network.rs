//! Forward pass and hand-written adjoints.
//!
//! Node states are stored as columns (`width × N`). Weights are `out × in`.

use nalgebra::{DMatrix, DMatrixView};
use rayon::prelude::*;

use super::{layout, ConvLayer, Layout, ModelConfig, ModelParams, Norm};
use crate::chem::Geometry;
use crate::datagen::Matching;
use crate::error::{Error, Result};
use crate::features::{featurize, FeatureGraph};
use crate::linalg::{expm_antisymmetric, expm_pullback, SkewSymmetric, SpecialOrthogonal, UpperTriangular};
use crate::losses::{
    det_overlap_grad, det_overlap_loss, huber_sum_grad, sign_invariant_orbital_grad,
    sign_invariant_orbital_loss, LossParts, LossWeights, OccupiedSelector,
};

const LN_EPS: f64 = 1e-5;
/// Molecules per gradient accumulation chunk; fixed so the reduction order
/// never depends on the thread count.
const CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub a_upper: UpperTriangular,
    pub m_pred: SpecialOrthogonal,
}

/// One training example with precomputed features.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    /// Reported in [`Error::NumericalFailure`].
    pub id: usize,
    pub features: &'a FeatureGraph,
    pub a_ref: &'a [f64],
    pub m_ref: &'a DMatrix<f64>,
    pub selector: &'a OccupiedSelector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub loss: LossParts,
    pub grads: ModelParams,
}

fn add_bias(z: &mut DMatrix<f64>, b: &DMatrix<f64>) {
    for mut col in z.column_iter_mut() {
        for (v, bv) in col.iter_mut().zip(b.iter()) {
            *v += bv;
        }
    }
}

fn add_row_sums(target: &mut DMatrix<f64>, m: &DMatrix<f64>) {
    for col in m.column_iter() {
        for (t, v) in target.iter_mut().zip(col.iter()) {
            *t += v;
        }
    }
}

fn affine(p: &ModelParams, w: usize, b: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = &p.tensors[w] * x;
    add_bias(&mut z, &p.tensors[b]);
    z
}

fn tanh_deriv(act: &DMatrix<f64>) -> DMatrix<f64> {
    act.map(|a| 1.0 - a * a)
}

struct NormTape {
    xhat: DMatrix<f64>,
    inv_std: Vec<f64>,
}

/// Layer normalization over each column.
fn norm_forward(p: &ModelParams, norm: Norm, z: &DMatrix<f64>) -> (DMatrix<f64>, NormTape) {
    let (gain, bias) = (&p.tensors[norm.gain], &p.tensors[norm.bias]);
    let d = z.nrows() as f64;
    let mut xhat = z.clone();
    let mut inv_std = Vec::with_capacity(z.ncols());
    for mut col in xhat.column_iter_mut() {
        let mean = col.sum() / d;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        col.apply(|v| *v = (*v - mean) * inv);
        inv_std.push(inv);
    }
    let mut y = xhat.clone();
    for mut col in y.column_iter_mut() {
        for ((v, g), b) in col.iter_mut().zip(gain.iter()).zip(bias.iter()) {
            *v = *v * g + b;
        }
    }
    (y, NormTape { xhat, inv_std })
}

fn norm_backward(
    p: &ModelParams,
    norm: Norm,
    tape: &NormTape,
    dy: &DMatrix<f64>,
    g: &mut ModelParams,
) -> DMatrix<f64> {
    let gain = &p.tensors[norm.gain];
    let d = dy.nrows() as f64;
    let mut dz = DMatrix::zeros(dy.nrows(), dy.ncols());
    for c in 0..dy.ncols() {
        let xhat = tape.xhat.column(c);
        let dxhat = dy.column(c).component_mul(&gain.column(0));
        let m1 = dxhat.sum() / d;
        let m2 = dxhat.dot(&xhat) / d;
        for r in 0..dy.nrows() {
            dz[(r, c)] = tape.inv_std[c] * (dxhat[r] - m1 - xhat[r] * m2);
            g.tensors[norm.gain][r] += dy[(r, c)] * xhat[r];
            g.tensors[norm.bias][r] += dy[(r, c)];
        }
    }
    dz
}

/// `H × d_in` view of slice `k` of a kernel weight stored `[H·d_in, kh]`.
fn kernel_slice(data: &[f64], k: usize, h: usize, d_in: usize) -> DMatrixView<'_, f64> {
    let hd = h * d_in;
    DMatrixView::from_slice(&data[k * hd..(k + 1) * hd], h, d_in)
}

struct ConvTape {
    x: DMatrix<f64>,
    kappa: DMatrix<f64>,
    /// `y[k] = W_k x` for every kernel slice, then the bias kernel.
    y: Vec<DMatrix<f64>>,
    act: DMatrix<f64>,
}

/// `x'_i = tanh(W x_i + b + Σ_j K(e_ij) x_j) + shortcut(x_i)`.
fn conv_forward(
    p: &ModelParams,
    layer: &ConvLayer,
    h: usize,
    x: &DMatrix<f64>,
    edges: &[(usize, usize)],
    edge_x: &DMatrix<f64>,
) -> (DMatrix<f64>, ConvTape) {
    let kappa = affine(p, layer.kernel1.w, layer.kernel1.b, &edge_x.transpose()).map(f64::tanh);
    let kh = kappa.nrows();
    let w2 = p.tensors[layer.kernel2.w].as_slice();
    let mut y: Vec<DMatrix<f64>> = (0..kh).map(|k| kernel_slice(w2, k, h, layer.d_in) * x).collect();
    y.push(kernel_slice(p.tensors[layer.kernel2.b].as_slice(), 0, h, layer.d_in) * x);

    let mut pre = affine(p, layer.node.w, layer.node.b, x);
    for (e, &(i, j)) in edges.iter().enumerate() {
        let mut target = pre.column_mut(i);
        for k in 0..kh {
            target.axpy(kappa[(k, e)], &y[k].column(j), 1.0);
        }
        target += y[kh].column(j);
    }
    let act = pre.map(f64::tanh);
    let out = match layer.shortcut {
        Some(s) => &act + &p.tensors[s] * x,
        None => &act + x,
    };
    (
        out,
        ConvTape {
            x: x.clone(),
            kappa,
            y,
            act,
        },
    )
}

fn conv_backward(
    p: &ModelParams,
    layer: &ConvLayer,
    h: usize,
    tape: &ConvTape,
    edges: &[(usize, usize)],
    edge_x: &DMatrix<f64>,
    d_out: &DMatrix<f64>,
    g: &mut ModelParams,
) -> DMatrix<f64> {
    let x = &tape.x;
    let kh = tape.kappa.nrows();
    let dh = d_out.component_mul(&tanh_deriv(&tape.act));
    let mut dx = match layer.shortcut {
        Some(s) => {
            g.tensors[s] += d_out * x.transpose();
            p.tensors[s].tr_mul(d_out)
        }
        None => d_out.clone(),
    };
    g.tensors[layer.node.w] += &dh * x.transpose();
    add_row_sums(&mut g.tensors[layer.node.b], &dh);
    dx += p.tensors[layer.node.w].tr_mul(&dh);

    let mut dy: Vec<DMatrix<f64>> = (0..=kh).map(|_| DMatrix::zeros(h, x.ncols())).collect();
    let mut dkappa = DMatrix::zeros(kh, edges.len());
    for (e, &(i, j)) in edges.iter().enumerate() {
        let gi = dh.column(i);
        for k in 0..kh {
            dkappa[(k, e)] = gi.dot(&tape.y[k].column(j));
            dy[k].column_mut(j).axpy(tape.kappa[(k, e)], &gi, 1.0);
        }
        dy[kh].column_mut(j).axpy(1.0, &gi, 1.0);
    }
    let du = dkappa.component_mul(&tanh_deriv(&tape.kappa));
    g.tensors[layer.kernel1.w] += &du * edge_x;
    add_row_sums(&mut g.tensors[layer.kernel1.b], &du);

    let hd = h * layer.d_in;
    for k in 0..=kh {
        let dw = &dy[k] * x.transpose();
        let (target, source, offset) = if k < kh {
            (layer.kernel2.w, p.tensors[layer.kernel2.w].as_slice(), k * hd)
        } else {
            (layer.kernel2.b, p.tensors[layer.kernel2.b].as_slice(), 0)
        };
        for (t, v) in g.tensors[target].as_mut_slice()[offset..offset + hd]
            .iter_mut()
            .zip(dw.as_slice())
        {
            *t += v;
        }
        let slot = if k < kh { k } else { 0 };
        dx += kernel_slice(source, slot, h, layer.d_in).tr_mul(&dy[k]);
    }
    dx
}

struct Tape {
    x0: DMatrix<f64>,
    proj_act: DMatrix<f64>,
    proj_norm: NormTape,
    conv: [Vec<ConvTape>; 2],
    cat: DMatrix<f64>,
    fusion_norm: NormTape,
    fused: DMatrix<f64>,
    /// Input of every readout layer.
    readout_in: Vec<DMatrix<f64>>,
    a: DMatrix<f64>,
}

fn check_features(cfg: &ModelConfig, fg: &FeatureGraph) -> Result<()> {
    if fg.config != cfg.feature_config() {
        return Err(Error::invalid("features were built with a different configuration"));
    }
    if fg.node_x.ncols() != cfg.raw_node_width() || fg.n < 2 {
        return Err(Error::invalid("feature graph does not match the model"));
    }
    Ok(())
}

fn forward_tape(
    p: &ModelParams,
    cfg: &ModelConfig,
    lay: &Layout,
    fg: &FeatureGraph,
    id: usize,
) -> Result<(Prediction, Tape)> {
    check_features(cfg, fg)?;
    let h = cfg.hidden_dim;
    let n = fg.n;
    let x0 = fg.node_x.transpose();
    let proj_act = affine(p, lay.proj1.w, lay.proj1.b, &x0).map(f64::tanh);
    let z2 = affine(p, lay.proj2.w, lay.proj2.b, &proj_act);
    let (projected, proj_norm) = norm_forward(p, lay.proj_norm, &z2);
    let mut x_in = DMatrix::zeros(cfg.conv_input_width(), n);
    x_in.rows_mut(0, cfg.proj_dim).copy_from(&projected);
    x_in.rows_mut(cfg.proj_dim, x0.nrows()).copy_from(&x0);

    let graphs = [(&fg.fine_edges, &fg.fine_edge_x), (&fg.coarse_edges, &fg.coarse_edge_x)];
    let mut conv: [Vec<ConvTape>; 2] = [Vec::new(), Vec::new()];
    let mut outs = Vec::with_capacity(2);
    for (s, (edges, edge_x)) in graphs.iter().enumerate() {
        let mut x = x_in.clone();
        for layer in &lay.scales[s] {
            let (next, tape) = conv_forward(p, layer, h, &x, edges, edge_x);
            conv[s].push(tape);
            x = next;
        }
        outs.push(x);
    }
    let mut cat = DMatrix::zeros(2 * h, n);
    cat.rows_mut(0, h).copy_from(&outs[0]);
    cat.rows_mut(h, h).copy_from(&outs[1]);
    let (normed, fusion_norm) = norm_forward(p, lay.fusion_norm, &affine(p, lay.fusion.w, lay.fusion.b, &cat));
    let fused = normed.map(f64::tanh);

    let pairs = &fg.complete_pairs;
    let ew = fg.pair_edge_x.ncols();
    let mut r = DMatrix::zeros(cfg.readout_input_width(), pairs.len());
    for (c, &(i, j)) in pairs.iter().enumerate() {
        let (fi, fj) = (fused.column(i), fused.column(j));
        let mut col = r.column_mut(c);
        for k in 0..h {
            col[k] = fi[k] + fj[k];
            col[h + k] = fi[k] - fj[k];
            col[2 * h + k] = fi[k] * fj[k];
        }
        for k in 0..ew {
            col[3 * h + k] = fg.pair_edge_x[(c, k)];
        }
        for k in 0..fg.pair_x.ncols() {
            col[3 * h + ew + k] = fg.pair_x[(c, k)];
        }
    }
    let mut readout_in = vec![r];
    let last = lay.readout.len() - 1;
    let mut out = DMatrix::zeros(0, 0);
    for (k, lin) in lay.readout.iter().enumerate() {
        let z = affine(p, lin.w, lin.b, &readout_in[k]);
        if k == last {
            out = z;
        } else {
            readout_in.push(z.map(f64::tanh));
        }
    }
    let a_upper = UpperTriangular::new(n, out.iter().copied().collect())?;
    if a_upper.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure { record: id });
    }
    let skew = SkewSymmetric::from_upper(&a_upper);
    let m_pred = expm_antisymmetric(&skew)?;
    let a = skew.into_matrix();
    Ok((
        Prediction { a_upper, m_pred },
        Tape {
            x0,
            proj_act,
            proj_norm,
            conv,
            cat,
            fusion_norm,
            fused,
            readout_in,
            a,
        },
    ))
}

fn backward(
    p: &ModelParams,
    cfg: &ModelConfig,
    lay: &Layout,
    fg: &FeatureGraph,
    tape: &Tape,
    da: &[f64],
    g: &mut ModelParams,
) {
    let h = cfg.hidden_dim;
    let last = lay.readout.len() - 1;
    let mut dz = DMatrix::from_row_slice(1, da.len(), da);
    let mut dr = DMatrix::zeros(0, 0);
    for k in (0..=last).rev() {
        let lin = lay.readout[k];
        let input = &tape.readout_in[k];
        g.tensors[lin.w] += &dz * input.transpose();
        add_row_sums(&mut g.tensors[lin.b], &dz);
        let d_in = p.tensors[lin.w].tr_mul(&dz);
        if k == 0 {
            dr = d_in;
        } else {
            dz = d_in.component_mul(&tanh_deriv(input));
        }
    }

    let mut dfused = DMatrix::zeros(h, fg.n);
    for (c, &(i, j)) in fg.complete_pairs.iter().enumerate() {
        for k in 0..h {
            let (sum, diff, prod) = (dr[(k, c)], dr[(h + k, c)], dr[(2 * h + k, c)]);
            let (fi, fj) = (tape.fused[(k, i)], tape.fused[(k, j)]);
            dfused[(k, i)] += sum + diff + prod * fj;
            dfused[(k, j)] += sum - diff + prod * fi;
        }
    }
    let dnormed = dfused.component_mul(&tanh_deriv(&tape.fused));
    let dfz = norm_backward(p, lay.fusion_norm, &tape.fusion_norm, &dnormed, g);
    g.tensors[lay.fusion.w] += &dfz * tape.cat.transpose();
    add_row_sums(&mut g.tensors[lay.fusion.b], &dfz);
    let dcat = p.tensors[lay.fusion.w].tr_mul(&dfz);

    let graphs = [(&fg.fine_edges, &fg.fine_edge_x), (&fg.coarse_edges, &fg.coarse_edge_x)];
    let mut dx_in = DMatrix::zeros(cfg.conv_input_width(), fg.n);
    for (s, (edges, edge_x)) in graphs.iter().enumerate() {
        let mut d = dcat.rows(s * h, h).into_owned();
        for (layer, t) in lay.scales[s].iter().zip(&tape.conv[s]).rev() {
            d = conv_backward(p, layer, h, t, edges, edge_x, &d, g);
        }
        dx_in += d;
    }

    let dproj = dx_in.rows(0, cfg.proj_dim).into_owned();
    let dz2 = norm_backward(p, lay.proj_norm, &tape.proj_norm, &dproj, g);
    g.tensors[lay.proj2.w] += &dz2 * tape.proj_act.transpose();
    add_row_sums(&mut g.tensors[lay.proj2.b], &dz2);
    let dz1 = p.tensors[lay.proj2.w]
        .tr_mul(&dz2)
        .component_mul(&tanh_deriv(&tape.proj_act));
    g.tensors[lay.proj1.w] += &dz1 * tape.x0.transpose();
    add_row_sums(&mut g.tensors[lay.proj1.b], &dz1);
}

/// Network output for precomputed features. Non-finite outputs are reported
/// as [`Error::NumericalFailure`] with record 0.
pub fn forward(params: &ModelParams, cfg: &ModelConfig, fg: &FeatureGraph) -> Result<Prediction> {
    let (lay, _) = layout(cfg);
    forward_tape(params, cfg, &lay, fg, 0).map(|(pred, _)| pred)
}

/// Featurizes `geom` and runs the network.
pub fn model_forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    geom: &Geometry,
    matching: &Matching,
) -> Result<Prediction> {
    let fg = featurize(geom, matching, &cfg.feature_config())?;
    forward(params, cfg, &fg)
}

struct SampleTerms {
    huber_sum: f64,
    det: f64,
    orb: f64,
    grads: ModelParams,
}

/// Loss terms of one sample and the gradient of
/// `c_h·Σ huber + c_det·L_det + c_orb·L_orb`.
fn sample_terms(
    p: &ModelParams,
    cfg: &ModelConfig,
    lay: &Layout,
    s: &Sample<'_>,
    weights: &LossWeights,
    coef: [f64; 3],
) -> Result<SampleTerms> {
    let fg = s.features;
    let (pred, tape) = forward_tape(p, cfg, lay, fg, s.id)?;
    let m = pred.m_pred.matrix();
    let (huber_sum, hgrad) = huber_sum_grad(pred.a_upper.values(), s.a_ref, weights.huber_delta)?;
    if m.shape() != s.m_ref.shape() {
        return Err(Error::invalid(format!("sample {}: reference orbital matrix has the wrong size", s.id)));
    }
    let (det, gdet) = det_overlap_grad(m, s.m_ref, s.selector);
    let (orb, gorb) = sign_invariant_orbital_grad(m, s.m_ref);
    if !(huber_sum.is_finite() && det.is_finite() && orb.is_finite()) {
        return Err(Error::NumericalFailure { record: s.id });
    }
    let mut da: Vec<f64> = hgrad.iter().map(|g| g * coef[0]).collect();
    if coef[1] != 0.0 || coef[2] != 0.0 {
        let gm = gdet * coef[1] + gorb * coef[2];
        let ga = expm_pullback(&tape.a, &gm);
        for (slot, &(i, j)) in da.iter_mut().zip(&fg.complete_pairs) {
            *slot += ga[(i, j)] - ga[(j, i)];
        }
    }
    let mut grads = ModelParams::zeros(cfg);
    backward(p, cfg, lay, fg, &tape, &da, &mut grads);
    if grads.tensors.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::NumericalFailure { record: s.id });
    }
    Ok(SampleTerms {
        huber_sum,
        det,
        orb,
        grads,
    })
}

/// Batch loss with the reduction of [`model_gradients`], without gradients.
pub fn model_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[Sample<'_>],
    weights: &LossWeights,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    weights.validate()?;
    let (lay, _) = layout(cfg);
    let terms: Vec<Result<[f64; 3]>> = batch
        .par_iter()
        .map(|s| {
            let (pred, _) = forward_tape(params, cfg, &lay, s.features, s.id)?;
            let m = pred.m_pred.matrix();
            if m.shape() != s.m_ref.shape() {
                return Err(Error::invalid(format!(
                    "sample {}: reference orbital matrix has the wrong size",
                    s.id
                )));
            }
            let (h, _) = huber_sum_grad(pred.a_upper.values(), s.a_ref, weights.huber_delta)?;
            let det = det_overlap_loss(m, s.m_ref, s.selector);
            let orb = sign_invariant_orbital_loss(m, s.m_ref);
            if !(h.is_finite() && det.is_finite() && orb.is_finite()) {
                return Err(Error::NumericalFailure { record: s.id });
            }
            Ok([h, det, orb])
        })
        .collect();
    let mut sums = [0.0; 3];
    for t in terms {
        let t = t?;
        for k in 0..3 {
            sums[k] += t[k];
        }
    }
    let total_pairs: usize = batch.iter().map(|s| s.a_ref.len()).sum();
    let molecules = batch.len() as f64;
    let huber = sums[0] / total_pairs.max(1) as f64;
    let det = sums[1] / molecules;
    let orb = sums[2] / molecules;
    Ok(LossParts {
        huber,
        det,
        orb,
        total: huber + weights.lambda1 * det + weights.lambda2 * orb,
    })
}

/// Batch loss and its parameter gradient. Huber terms are averaged over
/// every generator entry in the batch, the gauge terms over molecules.
pub fn model_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[Sample<'_>],
    weights: &LossWeights,
) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    weights.validate()?;
    let (lay, _) = layout(cfg);
    let total_pairs: usize = batch.iter().map(|s| s.a_ref.len()).sum();
    let molecules = batch.len() as f64;
    let coef = [
        1.0 / total_pairs.max(1) as f64,
        weights.lambda1 / molecules,
        weights.lambda2 / molecules,
    ];
    let chunks: Vec<Result<SampleTerms>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc: Option<SampleTerms> = None;
            for s in chunk {
                let t = sample_terms(params, cfg, &lay, s, weights, coef)?;
                acc = Some(match acc {
                    None => t,
                    Some(mut a) => {
                        a.huber_sum += t.huber_sum;
                        a.det += t.det;
                        a.orb += t.orb;
                        a.grads.axpy(1.0, &t.grads);
                        a
                    }
                });
            }
            Ok(acc.expect("chunks are non-empty"))
        })
        .collect();
    let mut total: Option<SampleTerms> = None;
    for c in chunks {
        let c = c?;
        total = Some(match total {
            None => c,
            Some(mut a) => {
                a.huber_sum += c.huber_sum;
                a.det += c.det;
                a.orb += c.orb;
                a.grads.axpy(1.0, &c.grads);
                a
            }
        });
    }
    let t = total.expect("batch is non-empty");
    let huber = t.huber_sum / total_pairs.max(1) as f64;
    let det = t.det / molecules;
    let orb = t.orb / molecules;
    Ok(BatchGradients {
        loss: LossParts {
            huber,
            det,
            orb,
            total: huber + weights.lambda1 * det + weights.lambda2 * orb,
        },
        grads: t.grads,
    })
}
