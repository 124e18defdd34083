//! Multi-head graph attention over session nodes and the mean readout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{init_uniform, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GatHead {
    /// `d_in x d_head`.
    pub transform: ParamId,
    /// `2 d_head x 1`; the first half scores the target, the second the source.
    pub attention: ParamId,
}

#[derive(Clone, Debug)]
pub struct GatParams {
    pub heads: Vec<GatHead>,
    pub head_dim: usize,
    pub negative_slope: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub transform: Var,
    pub attention_target: Var,
    pub attention_source: Var,
}

/// Parameter-only quantities of the fused readout, computable once and
/// shared by many graphs.
#[derive(Clone, Copy, Debug)]
pub struct GatShared {
    /// Column `h` is `W_h a_target,h`; `d_in x heads`.
    pub scores_target: Var,
    /// Column `h` is `W_h a_source,h`; `d_in x heads`.
    pub scores_source: Var,
    /// Head transforms stacked vertically, `heads * d_in x d_head`.
    pub stacked: Var,
}

#[derive(Clone, Debug)]
pub struct BoundGat {
    pub heads: Vec<BoundHead>,
    pub shared: GatShared,
    pub negative_slope: f64,
}

impl GatParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        head_dim: usize,
        heads: usize,
        negative_slope: f64,
        rng: &mut R,
    ) -> Self {
        assert!(heads >= 1, "at least one attention head");
        let heads = (0..heads)
            .map(|h| GatHead {
                transform: store.insert(
                    format!("{prefix}.head{h}.w"),
                    init_uniform(input_dim, head_dim, 1.0 / (input_dim as f64).sqrt(), rng),
                ),
                attention: store.insert(
                    format!("{prefix}.head{h}.a"),
                    init_uniform(2 * head_dim, 1, 1.0 / (2.0 * head_dim as f64).sqrt(), rng),
                ),
            })
            .collect();
        Self {
            heads,
            head_dim,
            negative_slope,
        }
    }

    pub fn bind_heads<'t>(&self, tape: &mut Tape<'t>, store: &'t ParamStore) -> Result<Vec<BoundHead>> {
        self.heads
            .iter()
            .map(|h| {
                let a = tape.param(store, h.attention);
                Ok(BoundHead {
                    transform: tape.param(store, h.transform),
                    attention_target: tape.slice_rows(a, 0, self.head_dim)?,
                    attention_source: tape.slice_rows(a, self.head_dim, self.head_dim)?,
                })
            })
            .collect()
    }

    pub fn shared(tape: &mut Tape<'_>, heads: &[BoundHead]) -> Result<GatShared> {
        let mut targets = Vec::with_capacity(heads.len());
        let mut sources = Vec::with_capacity(heads.len());
        for h in heads {
            targets.push(tape.matmul(h.transform, h.attention_target)?);
            sources.push(tape.matmul(h.transform, h.attention_source)?);
        }
        let transforms: Vec<Var> = heads.iter().map(|h| h.transform).collect();
        Ok(GatShared {
            scores_target: tape.concat(&targets, 1)?,
            scores_source: tape.concat(&sources, 1)?,
            stacked: tape.concat(&transforms, 0)?,
        })
    }

    pub fn bind<'t>(&self, tape: &mut Tape<'t>, store: &'t ParamStore) -> Result<BoundGat> {
        let heads = self.bind_heads(tape, store)?;
        let shared = Self::shared(tape, &heads)?;
        Ok(BoundGat {
            heads,
            shared,
            negative_slope: self.negative_slope,
        })
    }

    /// Binds the heads on `tape` but takes the fused-readout quantities from
    /// `shared`, typically leaves holding values computed elsewhere.
    pub fn bind_with<'t>(&self, tape: &mut Tape<'t>, store: &'t ParamStore, shared: GatShared) -> Result<BoundGat> {
        Ok(BoundGat {
            heads: self.bind_heads(tape, store)?,
            shared,
            negative_slope: self.negative_slope,
        })
    }
}

fn check_mask(mask: &Tensor, n: usize) -> Result<()> {
    if mask.shape() != [n, n] {
        return Err(Error::Data(format!(
            "attention mask {:?} for {n} nodes",
            mask.shape()
        )));
    }
    for i in 0..n {
        if mask.get(i, i) == 0.0 {
            return Err(Error::Data(format!("node {i} has no self-loop")));
        }
    }
    Ok(())
}

/// Attention matrix of one head from per-node target scores (`N x 1`) and
/// source scores (`1 x N`): `softmax_j(LeakyReLU(s_i + t_j))` over the mask.
fn attention(tape: &mut Tape<'_>, target: Var, source: Var, mask: &Tensor, slope: f64) -> Result<Var> {
    let logits = tape.add(target, source)?;
    let logits = tape.leaky_relu(logits, slope);
    Ok(tape.masked_softmax(logits, mask)?)
}

/// Updated nodes `sum_j alpha_ij h_j W`, averaged over heads; `N x d_head`.
pub fn gat_forward(tape: &mut Tape<'_>, nodes: Var, mask: &Tensor, params: &BoundGat) -> Result<Var> {
    check_mask(mask, tape.value(nodes).rows())?;
    let mut outputs = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let z = tape.matmul(nodes, head.transform)?;
        let s = tape.matmul(z, head.attention_target)?;
        let t = tape.matmul(z, head.attention_source)?;
        let t = tape.transpose(t)?;
        let alpha = attention(tape, s, t, mask, params.negative_slope)?;
        outputs.push(tape.matmul(alpha, z)?);
    }
    let mut sum = outputs[0];
    for &o in &outputs[1..] {
        sum = tape.add(sum, o)?;
    }
    Ok(tape.scale(sum, 1.0 / outputs.len() as f64))
}

/// Mean over nodes; `1 x d`.
pub fn readout(tape: &mut Tape<'_>, nodes: Var) -> Result<Var> {
    Ok(tape.mean(nodes, 0)?)
}

/// Per-head attention-weighted node means `mean_i alpha_i. H`, concatenated
/// into `1 x heads * d_in`. [`gat_project`] turns rows of these into
/// readouts.
///
/// With no nonlinearity after head averaging the mean readout commutes with
/// each head's transform: `mean_i sum_j alpha_ij h_j W = (mean_i alpha_i. H) W`,
/// and the attention scores reduce to `H (W a)`.
pub fn gat_pool(tape: &mut Tape<'_>, nodes: Var, mask: &Tensor, params: &BoundGat) -> Result<Var> {
    let (n, d) = (tape.value(nodes).rows(), tape.value(nodes).cols());
    check_mask(mask, n)?;
    let heads = params.heads.len();
    let s = tape.matmul(nodes, params.shared.scores_target)?;
    let t = tape.matmul(nodes, params.shared.scores_source)?;
    let st = tape.transpose(s)?;
    let tt = tape.transpose(t)?;
    let mut coeffs = Vec::with_capacity(heads);
    for h in 0..heads {
        let target = tape.row(st, h)?;
        let target = tape.transpose(target)?;
        let source = tape.row(tt, h)?;
        let alpha = attention(tape, target, source, mask, params.negative_slope)?;
        coeffs.push(tape.mean(alpha, 0)?);
    }
    let c = if heads == 1 { coeffs[0] } else { tape.concat(&coeffs, 0)? };
    let pooled = tape.matmul(c, nodes)?;
    Ok(tape.reshape(pooled, 1, heads * d)?)
}

/// Head-averaged projection of pooled rows, `k x heads * d_in` to
/// `k x d_head`.
pub fn gat_project(tape: &mut Tape<'_>, pooled: Var, params: &BoundGat) -> Result<Var> {
    let y = tape.matmul(pooled, params.shared.stacked)?;
    Ok(tape.scale(y, 1.0 / params.heads.len() as f64))
}

/// `readout(gat_forward(..))` computed without materialising per-head node
/// outputs.
pub fn gat_readout(tape: &mut Tape<'_>, nodes: Var, mask: &Tensor, params: &BoundGat) -> Result<Var> {
    let pooled = gat_pool(tape, nodes, mask, params)?;
    gat_project(tape, pooled, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn readout_is_mean() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let r = readout(&mut tape, x).unwrap();
        assert_eq!(tape.value(r).data(), &[2.0, 3.0]);
    }

    #[test]
    fn identical_pair_attends_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let gat = GatParams::register(&mut store, "gat", 3, 3, 1, 0.2, &mut rng);
        let mut tape = Tape::new();
        let p = gat.bind(&mut tape, &store).unwrap();
        let h = tape.leaf(Tensor::matrix(2, 3, vec![0.4, -0.1, 0.9, 0.4, -0.1, 0.9]).unwrap());
        let head = p.heads[0];
        let z = tape.matmul(h, head.transform).unwrap();
        let s = tape.matmul(z, head.attention_target).unwrap();
        let t = tape.matmul(z, head.attention_source).unwrap();
        let t = tape.transpose(t).unwrap();
        let a = attention(&mut tape, s, t, &Tensor::full(2, 2, 1.0), 0.2).unwrap();
        assert!(tape.value(a).data().iter().all(|&w| (w - 0.5).abs() < 1e-15));
    }

    #[test]
    fn single_node_returns_head_average_of_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let gat = GatParams::register(&mut store, "gat", 3, 3, 4, 0.2, &mut rng);
        let h = Tensor::row(&[0.3, -0.7, 1.1]);
        let mut expected = Tensor::zeros(1, 3);
        for head in &gat.heads {
            expected.add_assign(&h.matmul(store.get(head.transform)).unwrap());
        }
        expected.scale_assign(0.25);
        let mut tape = Tape::new();
        let p = gat.bind(&mut tape, &store).unwrap();
        let x = tape.leaf(h);
        let out = gat_forward(&mut tape, x, &Tensor::full(1, 1, 1.0), &p).unwrap();
        assert!(tape.value(out).max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn missing_self_loop_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let gat = GatParams::register(&mut store, "gat", 2, 2, 1, 0.2, &mut rng);
        let mut tape = Tape::new();
        let p = gat.bind(&mut tape, &store).unwrap();
        let x = tape.leaf(Tensor::zeros(2, 2));
        let mask = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(gat_forward(&mut tape, x, &mask, &p).is_err());
    }
}
