//! Forward pass with cached intermediates and the matching backward pass.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::layers::{log_softmax_at, softmax, AttentionCache, AttentionWeights, EvolveCache, EvolveWeights};
use super::{numeric_features, ClassifierHead, EncoderConfig, EncoderParams, InstanceEmbedding, CLASS_EMBED_WIDTH, MOTION_FEATURES, NUMERIC_FEATURES, STATE_WIDTH};
use crate::data::{AgentClass, InteractionGraph};
use crate::error::{Error, Result};
use crate::params::{ParamStore, TensorId};

/// Target neighborhood of one frame: the target first, then its
/// neighbors.
#[derive(Debug, Clone)]
pub(crate) struct GraphFrame {
    pub(crate) numeric: Array2<f64>,
    pub(crate) classes: Vec<usize>,
}

/// Numeric model input derived from one instance.
#[derive(Debug, Clone)]
pub struct EncoderInput {
    tokens: Array2<f64>,
    token_classes: Vec<usize>,
    frames: Vec<GraphFrame>,
}

impl EncoderInput {
    pub fn new(states: ArrayView2<f64>, graphs: &[InteractionGraph], cfg: &EncoderConfig) -> Result<Self> {
        let mut input = Self::from_states(states, cfg)?;
        input.frames = Self::graph_frames(graphs, cfg)?;
        Ok(input)
    }

    /// Validates a `T x 6` state matrix (uid, class, x, y, z, orientation).
    pub(crate) fn from_states(states: ArrayView2<f64>, cfg: &EncoderConfig) -> Result<Self> {
        if states.ncols() != 6 || states.nrows() != cfg.frames {
            return Err(Error::precondition(format!(
                "state matrix is {}x{}, expected {}x6",
                states.nrows(),
                states.ncols(),
                cfg.frames
            )));
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(Error::precondition("state matrix has non-finite entries"));
        }
        let mut tokens = Array2::zeros((states.nrows(), NUMERIC_FEATURES + MOTION_FEATURES));
        let mut token_classes = Vec::with_capacity(states.nrows());
        for (t, row) in states.rows().into_iter().enumerate() {
            let c = row[1];
            if c.fract() != 0.0 || c < 0.0 || c as usize >= AgentClass::COUNT {
                return Err(Error::precondition(format!("frame {t}: invalid class code {c}")));
            }
            token_classes.push(c as usize);
            let s = cfg.pos_scale;
            tokens
                .slice_mut(s![t, ..NUMERIC_FEATURES])
                .assign(&ndarray::arr1(&[row[2] / s, row[3] / s, row[4] / s, row[5].cos(), row[5].sin()]));
            if t > 0 {
                let m = cfg.motion_scale;
                tokens[[t, NUMERIC_FEATURES]] = (row[2] - states[[t - 1, 2]]) / m;
                tokens[[t, NUMERIC_FEATURES + 1]] = (row[3] - states[[t - 1, 3]]) / m;
            }
        }
        // the first frame has no predecessor and reuses the next displacement
        if states.nrows() > 1 {
            let next = tokens.slice(s![1, NUMERIC_FEATURES..]).to_owned();
            tokens.slice_mut(s![0, NUMERIC_FEATURES..]).assign(&next);
        }
        Ok(EncoderInput {
            tokens,
            token_classes,
            frames: Vec::new(),
        })
    }

    pub(crate) fn graph_frames(graphs: &[InteractionGraph], cfg: &EncoderConfig) -> Result<Vec<GraphFrame>> {
        if graphs.is_empty() {
            return Err(Error::precondition("empty graph list"));
        }
        if graphs.len() != cfg.frames {
            return Err(Error::precondition(format!(
                "{} graphs, encoder expects {}",
                graphs.len(),
                cfg.frames
            )));
        }
        Ok(graphs
            .iter()
            .map(|g| {
                let target = g.target_index();
                let members: Vec<usize> = std::iter::once(target).chain(g.neighbors(target)).collect();
                let mut numeric = Array2::zeros((members.len(), NUMERIC_FEATURES));
                let mut classes = Vec::with_capacity(members.len());
                for (row, &m) in members.iter().enumerate() {
                    let v = &g.vertices[m];
                    numeric.row_mut(row).assign(&ndarray::arr1(&numeric_features(v, cfg.pos_scale)));
                    classes.push(v.class.index());
                }
                GraphFrame { numeric, classes }
            })
            .collect())
    }
}

/// Fixed sinusoidal encoding of frame indices, `frames x width`.
pub(crate) fn positional_encoding(frames: usize, width: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((frames, width));
    for t in 0..frames {
        for j in 0..width {
            let rate = 10000f64.powf(-((j / 2 * 2) as f64) / width as f64);
            let angle = t as f64 * rate;
            pe[[t, j]] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

pub(crate) struct StateLayerCache {
    input: Array2<f64>,
    attn: AttentionCache,
    mixed: Array2<f64>,
    projected: Array2<f64>,
    mid: Array2<f64>,
    act: Array2<f64>,
    ff_out: Array2<f64>,
}

pub(crate) struct StateCache {
    x0: Array2<f64>,
    layers: Vec<StateLayerCache>,
}

pub(crate) struct GraphCache {
    feats: Vec<Array2<f64>>,
    means: Vec<Array1<f64>>,
    weights: Vec<Array2<f64>>,
    evolve: Vec<EvolveCache>,
    pub(crate) nodes: Array2<f64>,
    inner: Vec<AttentionCache>,
    inner_out: Array2<f64>,
    outer: AttentionCache,
}

pub(crate) struct HeadOutput {
    pub concat: Array1<f64>,
    pub g: Array1<f64>,
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
}

pub(crate) struct Forward {
    state: StateCache,
    f_state: Array1<f64>,
    graph: GraphCache,
    f_graph: Array1<f64>,
    head: HeadOutput,
}

impl Forward {
    pub(crate) fn embedding(&self) -> InstanceEmbedding {
        InstanceEmbedding {
            g: self.head.g.to_vec(),
            f_state: self.f_state.to_vec(),
            f_graph: self.f_graph.to_vec(),
        }
    }

    pub(crate) fn probs(&self) -> ArrayView1<'_, f64> {
        self.head.probs.view()
    }

    pub(crate) fn logits(&self) -> ArrayView1<'_, f64> {
        self.head.logits.view()
    }
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    a.insert_axis(Axis(1)).dot(&b.insert_axis(Axis(0)))
}

fn acc_mat(grads: &mut ParamStore, id: TensorId, m: &Array2<f64>) {
    let mut v = grads.mat_mut(id);
    v += m;
}

fn acc_vec(grads: &mut ParamStore, id: TensorId, v: ArrayView1<f64>) {
    let mut g = grads.vec_mut(id);
    g += &v;
}

impl EncoderParams {
    fn attention(&self, q: TensorId, k: TensorId, v: TensorId, heads: usize) -> AttentionWeights<'_> {
        AttentionWeights {
            wq: self.store.mat(q),
            wk: self.store.mat(k),
            wv: self.store.mat(v),
            heads,
        }
    }

    fn evolve_cell(&self) -> EvolveWeights<'_> {
        let ids = &self.ids;
        EvolveWeights {
            uz: self.store.mat(ids.evolve_uz),
            ur: self.store.mat(ids.evolve_ur),
            h_in: self.store.mat(ids.evolve_h_in),
            h_hid: self.store.mat(ids.evolve_h_hid),
            bz: self.store.mat(ids.evolve_bz),
            br: self.store.mat(ids.evolve_br),
            bh: self.store.mat(ids.evolve_bh),
        }
    }

    /// Class embedding rows followed by the numeric columns.
    fn agent_features(&self, numeric: &Array2<f64>, classes: &[usize]) -> Array2<f64> {
        let table = self.store.mat(self.ids.class_embed);
        let mut out = Array2::zeros((numeric.nrows(), CLASS_EMBED_WIDTH + numeric.ncols()));
        for (i, &c) in classes.iter().enumerate() {
            out.slice_mut(s![i, ..CLASS_EMBED_WIDTH]).assign(&table.row(c));
        }
        out.slice_mut(s![.., CLASS_EMBED_WIDTH..]).assign(numeric);
        out
    }

    fn scalar(&self, id: TensorId) -> f64 {
        self.store.slice(id)[0]
    }

    pub(crate) fn forward_state(&self, input: &EncoderInput) -> (Array1<f64>, StateCache) {
        let x0 = self.agent_features(&input.tokens, &input.token_classes)
            + positional_encoding(input.tokens.nrows(), STATE_WIDTH);
        let mut h = x0.dot(&self.store.mat(self.ids.input_w).t()) + self.store.vec(self.ids.input_b);
        let mut layers = Vec::with_capacity(self.ids.layers.len());
        for ids in &self.ids.layers {
            let att = self.attention(ids.wq, ids.wk, ids.wv, self.config.n_heads);
            let (mixed, attn) = att.forward(h.view());
            let projected = mixed.dot(&self.store.mat(ids.wo).t()) + self.store.vec(ids.bo);
            let mid = &h + &(&projected * self.scalar(ids.attn_scale));
            let act = (mid.dot(&self.store.mat(ids.ff1_w).t()) + self.store.vec(ids.ff1_b)).mapv(f64::tanh);
            let ff_out = act.dot(&self.store.mat(ids.ff2_w).t()) + self.store.vec(ids.ff2_b);
            let next = &mid + &(&ff_out * self.scalar(ids.ff_scale));
            layers.push(StateLayerCache {
                input: h,
                attn,
                mixed,
                projected,
                mid,
                act,
                ff_out,
            });
            h = next;
        }
        let f_state = h.mean_axis(Axis(0)).expect("at least one frame");
        (f_state, StateCache { x0, layers })
    }

    pub(crate) fn forward_graph(&self, frames: &[GraphFrame]) -> (Array1<f64>, GraphCache) {
        let cell = self.evolve_cell();
        let mut w = self.store.mat(self.ids.gcn_init).to_owned();
        let dg = self.config.d_graph;
        let mut feats = Vec::with_capacity(frames.len());
        let mut means = Vec::with_capacity(frames.len());
        let mut weights = Vec::with_capacity(frames.len());
        let mut evolve = Vec::with_capacity(frames.len());
        let mut nodes = Array2::zeros((frames.len(), dg));
        for (t, frame) in frames.iter().enumerate() {
            if t > 0 {
                let (next, cache) = cell.forward(&w);
                evolve.push(cache);
                w = next;
            }
            let f = self.agent_features(&frame.numeric, &frame.classes);
            let mean = f.mean_axis(Axis(0)).expect("target is always present");
            nodes.row_mut(t).assign(&w.dot(&mean).mapv(f64::tanh));
            feats.push(f);
            means.push(mean);
            weights.push(w.clone());
        }
        let inner_att = self.attention(self.ids.inner_q, self.ids.inner_k, self.ids.inner_v, 1);
        let mut inner = Vec::with_capacity(frames.len());
        let mut inner_out = Array2::zeros((frames.len(), dg));
        for t in 0..frames.len() {
            let (out, cache) = inner_att.forward(nodes.slice(s![t..t + 1, ..]));
            inner_out.row_mut(t).assign(&out.row(0));
            inner.push(cache);
        }
        let outer_att = self.attention(self.ids.outer_q, self.ids.outer_k, self.ids.outer_v, 1);
        let (seq, outer) = outer_att.forward(inner_out.view());
        let f_graph = seq.mean_axis(Axis(0)).expect("at least one frame");
        (
            f_graph,
            GraphCache {
                feats,
                means,
                weights,
                evolve,
                nodes,
                inner,
                inner_out,
                outer,
            },
        )
    }

    pub(crate) fn forward_head(&self, f_state: ArrayView1<f64>, f_graph: ArrayView1<f64>) -> HeadOutput {
        let concat = ndarray::concatenate(Axis(0), &[f_state, f_graph]).expect("1-d concat");
        let g = (self.store.mat(self.ids.fusion_w).dot(&concat) + self.store.vec(self.ids.fusion_b)).mapv(sigmoid);
        let w = self.store.mat(self.ids.classifier_w);
        let b = self.store.vec(self.ids.classifier_b);
        let logits = match self.config.head {
            ClassifierHead::Linear => w.dot(&g) + b,
            ClassifierHead::Cosine { scale } => {
                let gn = norm(g.view());
                let mut z = b.to_owned();
                for (c, row) in w.rows().into_iter().enumerate() {
                    let wn = norm(row);
                    if gn > 0.0 && wn > 0.0 {
                        z[c] += scale * row.dot(&g) / (gn * wn);
                    }
                }
                z
            }
        };
        let probs = softmax(logits.view());
        HeadOutput {
            concat,
            g,
            logits,
            probs,
        }
    }

    pub(crate) fn forward(&self, input: &EncoderInput) -> Forward {
        let (f_state, state) = self.forward_state(input);
        let (f_graph, graph) = self.forward_graph(&input.frames);
        let head = self.forward_head(f_state.view(), f_graph.view());
        Forward {
            state,
            f_state,
            graph,
            f_graph,
            head,
        }
    }

    /// Cross-entropy of the base classifier against class `label`.
    pub fn loss(&self, input: &EncoderInput, label: usize) -> f64 {
        -log_softmax_at(self.forward(input).logits(), label)
    }

    /// Cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, input: &EncoderInput, label: usize) -> (f64, ParamStore) {
        let fwd = self.forward(input);
        let loss = -log_softmax_at(fwd.logits(), label);
        let mut grads = self.store.zeros_like();
        let mut dlogits = fwd.head.probs.clone();
        dlogits[label] -= 1.0;
        self.backward(input, &fwd, dlogits.view(), &mut grads);
        (loss, grads)
    }

    fn backward(&self, input: &EncoderInput, fwd: &Forward, dlogits: ArrayView1<f64>, grads: &mut ParamStore) {
        let ids = &self.ids;
        let d = self.config.d_model;

        // classifier and fusion
        let head = &fwd.head;
        acc_vec(grads, ids.classifier_b, dlogits);
        let w = self.store.mat(ids.classifier_w);
        let dg = match self.config.head {
            ClassifierHead::Linear => {
                acc_mat(grads, ids.classifier_w, &outer(dlogits, head.g.view()));
                w.t().dot(&dlogits)
            }
            ClassifierHead::Cosine { scale } => {
                // z_c = scale * <w_c/|w_c|, g/|g|>; project each gradient onto
                // the tangent space of its normalized vector
                let gn = norm(head.g.view());
                let mut dg = Array1::zeros(head.g.len());
                if gn > 0.0 {
                    let u = &head.g / gn;
                    let mut du = Array1::<f64>::zeros(u.len());
                    let mut dw = Array2::<f64>::zeros(w.dim());
                    for (c, row) in w.rows().into_iter().enumerate() {
                        let wn = norm(row);
                        if wn == 0.0 {
                            continue;
                        }
                        let v = &row / wn;
                        du.scaled_add(scale * dlogits[c], &v);
                        let dv = &u * (scale * dlogits[c]);
                        let tangent = &dv - &(&v * v.dot(&dv));
                        dw.row_mut(c).assign(&(tangent / wn));
                    }
                    acc_mat(grads, ids.classifier_w, &dw);
                    dg = (&du - &(&u * u.dot(&du))) / gn;
                }
                dg
            }
        };
        let dpre = &dg * &head.g.mapv(|v| v * (1.0 - v));
        acc_mat(grads, ids.fusion_w, &outer(dpre.view(), head.concat.view()));
        acc_vec(grads, ids.fusion_b, dpre.view());
        let dconcat = self.store.mat(ids.fusion_w).t().dot(&dpre);
        let df_state = dconcat.slice(s![..d]);
        let df_graph = dconcat.slice(s![d..]);

        self.backward_graph(input, &fwd.graph, df_graph, grads);
        self.backward_state(input, &fwd.state, df_state, grads);
    }

    fn backward_graph(&self, input: &EncoderInput, cache: &GraphCache, df_graph: ArrayView1<f64>, grads: &mut ParamStore) {
        let ids = &self.ids;
        let frames = input.frames.len();
        let dseq = Array2::from_shape_fn((frames, df_graph.len()), |(_, j)| df_graph[j] / frames as f64);

        let outer_att = self.attention(ids.outer_q, ids.outer_k, ids.outer_v, 1);
        let og = outer_att.backward(cache.inner_out.view(), &cache.outer, dseq.view());
        acc_mat(grads, ids.outer_q, &og.dwq);
        acc_mat(grads, ids.outer_k, &og.dwk);
        acc_mat(grads, ids.outer_v, &og.dwv);

        let inner_att = self.attention(ids.inner_q, ids.inner_k, ids.inner_v, 1);
        let embed_grads = &mut Array2::<f64>::zeros((AgentClass::COUNT, CLASS_EMBED_WIDTH));
        let mut dweights = Vec::with_capacity(frames);
        for t in 0..frames {
            let node = cache.nodes.slice(s![t..t + 1, ..]);
            let ig = inner_att.backward(node, &cache.inner[t], og.dx.slice(s![t..t + 1, ..]));
            acc_mat(grads, ids.inner_q, &ig.dwq);
            acc_mat(grads, ids.inner_k, &ig.dwk);
            acc_mat(grads, ids.inner_v, &ig.dwv);

            let f_t = cache.nodes.row(t);
            let dpre = &ig.dx.row(0) * &f_t.mapv(|v| 1.0 - v * v);
            dweights.push(outer(dpre.view(), cache.means[t].view()));
            let dmean = cache.weights[t].t().dot(&dpre);
            let members = cache.feats[t].nrows() as f64;
            for &c in &input.frames[t].classes {
                let mut row = embed_grads.row_mut(c);
                row.scaled_add(1.0 / members, &dmean.slice(s![..CLASS_EMBED_WIDTH]));
            }
        }
        acc_mat(grads, ids.class_embed, embed_grads);

        // back through the weight evolution
        let cell = self.evolve_cell();
        let mut carry = dweights.pop().expect("at least one frame");
        for t in (1..frames).rev() {
            let eg = cell.backward(&cache.evolve[t - 1], &carry);
            acc_mat(grads, ids.evolve_uz, &eg.duz);
            acc_mat(grads, ids.evolve_ur, &eg.dur);
            acc_mat(grads, ids.evolve_h_in, &eg.dh_in);
            acc_mat(grads, ids.evolve_h_hid, &eg.dh_hid);
            acc_mat(grads, ids.evolve_bz, &eg.dbz);
            acc_mat(grads, ids.evolve_br, &eg.dbr);
            acc_mat(grads, ids.evolve_bh, &eg.dbh);
            carry = eg.dw_prev + &dweights[t - 1];
        }
        acc_mat(grads, ids.gcn_init, &carry);
    }

    fn backward_state(&self, input: &EncoderInput, cache: &StateCache, df_state: ArrayView1<f64>, grads: &mut ParamStore) {
        let ids = &self.ids;
        let frames = input.tokens.nrows();
        let mut dh = Array2::from_shape_fn((frames, df_state.len()), |(_, j)| df_state[j] / frames as f64);
        for (lid, lc) in ids.layers.iter().zip(&cache.layers).rev() {
            // feed-forward residual branch
            let ff_scale = self.scalar(lid.ff_scale);
            grads.slice_mut(lid.ff_scale)[0] += (&dh * &lc.ff_out).sum();
            let dff = &dh * ff_scale;
            acc_mat(grads, lid.ff2_w, &dff.t().dot(&lc.act));
            acc_vec(grads, lid.ff2_b, dff.sum_axis(Axis(0)).view());
            let dact = dff.dot(&self.store.mat(lid.ff2_w));
            let dpre = &dact * &lc.act.mapv(|v| 1.0 - v * v);
            acc_mat(grads, lid.ff1_w, &dpre.t().dot(&lc.mid));
            acc_vec(grads, lid.ff1_b, dpre.sum_axis(Axis(0)).view());
            let dmid = dh + dpre.dot(&self.store.mat(lid.ff1_w));

            // attention residual branch
            let attn_scale = self.scalar(lid.attn_scale);
            grads.slice_mut(lid.attn_scale)[0] += (&dmid * &lc.projected).sum();
            let dproj = &dmid * attn_scale;
            acc_mat(grads, lid.wo, &dproj.t().dot(&lc.mixed));
            acc_vec(grads, lid.bo, dproj.sum_axis(Axis(0)).view());
            let dmixed = dproj.dot(&self.store.mat(lid.wo));
            let att = self.attention(lid.wq, lid.wk, lid.wv, self.config.n_heads);
            let ag = att.backward(lc.input.view(), &lc.attn, dmixed.view());
            acc_mat(grads, lid.wq, &ag.dwq);
            acc_mat(grads, lid.wk, &ag.dwk);
            acc_mat(grads, lid.wv, &ag.dwv);
            dh = dmid + ag.dx;
        }
        acc_mat(grads, ids.input_w, &dh.t().dot(&cache.x0));
        acc_vec(grads, ids.input_b, dh.sum_axis(Axis(0)).view());
        let dx0 = dh.dot(&self.store.mat(ids.input_w));
        let mut embed_grads = Array2::<f64>::zeros((AgentClass::COUNT, CLASS_EMBED_WIDTH));
        for (t, &c) in input.token_classes.iter().enumerate() {
            let mut row = embed_grads.row_mut(c);
            row += &dx0.slice(s![t, ..CLASS_EMBED_WIDTH]);
        }
        acc_mat(grads, ids.class_embed, &embed_grads);
    }
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}
