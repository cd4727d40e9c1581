"""Gated belief propagation over the typed label graph.

Every label node carries a ``d_hid`` belief vector. Initial beliefs come from
an input network applied to (instance features, label embedding). For ``T``
steps each node aggregates its neighbours' beliefs through propagation
blocks and updates its own belief with a GRU cell. An output network maps
every belief, at every step, to a label confidence.

Propagation blocks are not free parameters. For an edge of kind ``k`` the
block sent from ``u`` to ``v`` has entries ``w_v^T M^k[i][j] w_u``, so a
new (unseen) label gets blocks as soon as it has an embedding.

Arrays are batched: beliefs are ``(B, n, d_hid)``, confidences ``(T+1, B, n)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from kgprop.diff_core import ParamSpec, ParamStore, init_params
from kgprop.errors import DimensionMismatch, InvalidConfig, NonFiniteValue
from kgprop.knowledge_graph import EDGE_KINDS, EdgeKind, TypedGraph
from kgprop.semantic_space import EmbeddingTable, LabelVocabulary

KIND_CODE = {k: i for i, k in enumerate(EDGE_KINDS)}
GRU_GATES = ("z", "r", "h")


sigmoid = expit


def _lin(x, w):
    """``x @ w.T`` on the last axis, evaluated row by row (no BLAS blocking)."""
    return np.einsum("...k,jk->...j", x, w)


@dataclass(frozen=True)
class ModelConfig:
    d_feat: int
    d_emb: int
    d_hid: int = 5
    T: int = 5
    fi_hidden: int = 16
    fo_hidden: int = 0
    relation_rank: int = 0
    tie_symmetric: bool = True

    def __post_init__(self):
        if self.d_feat < 1 or self.d_emb < 1:
            raise InvalidConfig("d_feat and d_emb must be positive")
        if self.d_hid < 1:
            raise InvalidConfig("d_hid must be at least 1")
        if self.T < 0:
            raise InvalidConfig("T must be non-negative")
        if self.fi_hidden < 1:
            raise InvalidConfig("fi_hidden must be at least 1")
        if self.fo_hidden < 0:
            raise InvalidConfig("fo_hidden must be non-negative")
        if not 0 <= self.relation_rank <= self.d_emb:
            raise InvalidConfig("relation_rank must lie in [0, d_emb]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class GraphContext:
    """Everything label-side a forward pass needs."""

    vocab: LabelVocabulary
    emb: EmbeddingTable
    graph: TypedGraph

    def __post_init__(self):
        if len(self.emb) != len(self.vocab):
            raise DimensionMismatch("embedding table and vocabulary sizes differ")
        if self.graph.node_count != len(self.vocab):
            raise DimensionMismatch(
                f"graph has {self.graph.node_count} nodes, vocabulary {len(self.vocab)}"
            )

    @property
    def n(self) -> int:
        return len(self.vocab)

    def seen_only(self) -> "GraphContext":
        s = self.vocab.seen_count
        return GraphContext(self.vocab.seen_only(), self.emb.subset(s), self.graph.subgraph(s))


@dataclass
class PropagationMatrix:
    """Block-sparse propagation matrix; block ``e`` carries ``senders[e] -> receivers[e]``.

    Blocks are sorted by (receiver, sender).
    """

    node_count: int
    receivers: np.ndarray
    senders: np.ndarray
    kinds: np.ndarray
    blocks: np.ndarray
    zsl_mask: bool = False

    def __post_init__(self):
        self._index = {(int(v), int(u)): e for e, (v, u) in enumerate(zip(self.receivers, self.senders))}
        # run boundaries of equal receivers, for np.add.reduceat
        if len(self.receivers):
            change = np.flatnonzero(np.diff(self.receivers)) + 1
            self.starts = np.concatenate([[0], change])
            self.targets = self.receivers[self.starts]
        else:
            self.starts = np.zeros(0, dtype=np.intp)
            self.targets = np.zeros(0, dtype=np.intp)

    def __len__(self):
        return len(self.receivers)

    def block(self, receiver: int, sender: int):
        e = self._index.get((receiver, sender))
        return None if e is None else self.blocks[e]

    def pairs(self) -> list[tuple[int, int]]:
        return list(self._index)

    def to_dense(self) -> np.ndarray:
        """Full ``(n*d, n*d)`` matrix whose ``(u, v)`` block row/col is ``block(v<-u)``.

        With ``H`` the stacked beliefs, ``(H @ dense)`` reshaped to ``(n, d)``
        equals the pre-activation aggregate of every node.
        """
        d = self.blocks.shape[-1] if len(self) else 0
        n = self.node_count
        out = np.zeros((n * d, n * d))
        for (v, u), e in self._index.items():
            out[u * d : (u + 1) * d, v * d : (v + 1) * d] = self.blocks[e]
        return out


@dataclass
class BeliefState:
    t: int
    h: np.ndarray


@dataclass
class StepTrace:
    """Intermediate values of one propagation step (all ``(B, n, d_hid)``)."""

    h_prev: np.ndarray
    u: np.ndarray
    z: np.ndarray
    r: np.ndarray
    h_tilde: np.ndarray


@dataclass
class ForwardPass:
    """Retained activations of a forward pass; ``p`` is ``(T+1, B, n)``."""

    x: np.ndarray
    emb: np.ndarray
    matrix: PropagationMatrix
    fi_hidden: np.ndarray
    h: list[np.ndarray]
    steps: list[StepTrace]
    logits: np.ndarray
    p: np.ndarray
    fo_hidden: list[np.ndarray] = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.p[-1]


def param_specs(cfg: ModelConfig) -> list[ParamSpec]:
    d, D, r = cfg.d_hid, cfg.d_emb, cfg.relation_rank
    specs = [
        ParamSpec("fi.W1", (cfg.fi_hidden, cfg.d_feat + D)),
        ParamSpec("fi.b1", (cfg.fi_hidden,), "zeros"),
        ParamSpec("fi.W2", (d, cfg.fi_hidden)),
        ParamSpec("fi.b2", (d,), "zeros"),
    ]
    npairs = len(relation_pairs(cfg))
    for kind in EDGE_KINDS:
        if r == 0:
            specs.append(ParamSpec(f"rel.{kind.value}.M", (npairs, D, D)))
        else:
            specs.append(ParamSpec(f"rel.{kind.value}.P", (npairs, D, r)))
            specs.append(ParamSpec(f"rel.{kind.value}.Q", (npairs, D, r)))
    for g in GRU_GATES:
        specs += [
            ParamSpec(f"gru.W{g}", (d, d)),
            ParamSpec(f"gru.U{g}", (d, d)),
            ParamSpec(f"gru.b{g}", (d,), "zeros"),
        ]
    if cfg.fo_hidden:
        specs += [
            ParamSpec("fo.W1", (cfg.fo_hidden, d)),
            ParamSpec("fo.b1", (cfg.fo_hidden,), "zeros"),
            ParamSpec("fo.W2", (1, cfg.fo_hidden)),
            ParamSpec("fo.b2", (1,), "zeros"),
        ]
    else:
        specs += [ParamSpec("fo.W", (1, d)), ParamSpec("fo.b", (1,), "zeros")]
    return specs


def relation_pairs(cfg: ModelConfig) -> list[tuple[int, int]]:
    """Block entries (i, j) that own a bilinear form; tied models keep i <= j."""
    d = cfg.d_hid
    if cfg.tie_symmetric:
        return [(i, j) for i in range(d) for j in range(i, d)]
    return [(i, j) for i in range(d) for j in range(d)]


class PropagationNet:
    def __init__(self, cfg: ModelConfig, params: ParamStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(param_specs(cfg), seed)
        expected = {s.name: s.shape for s in param_specs(cfg)}
        got = {k: v.shape for k, v in self.params.values.items()}
        if expected != got:
            raise DimensionMismatch("parameter store does not match the model config")
        pairs = relation_pairs(cfg)
        self._I = np.array([i for i, _ in pairs], dtype=np.intp)
        self._J = np.array([j for _, j in pairs], dtype=np.intp)

    # ----------------------------------------------------------- relations

    def _raw_forms(self, kind: EdgeKind) -> np.ndarray:
        p = self.params
        if self.cfg.relation_rank == 0:
            return p[f"rel.{kind.value}.M"]
        P, Q = p[f"rel.{kind.value}.P"], p[f"rel.{kind.value}.Q"]
        return P @ Q.transpose(0, 2, 1)

    def relation_tensor(self, kind: EdgeKind) -> np.ndarray:
        """All bilinear forms of one edge kind as ``(d_hid, d_hid, d_emb, d_emb)``."""
        d, D = self.cfg.d_hid, self.cfg.d_emb
        R = self._raw_forms(EdgeKind(kind))
        I, J = self._I, self._J
        full = np.empty((d, d, D, D))
        full[I, J] = R
        if self.cfg.tie_symmetric:
            off, diag = I != J, I == J
            full[J[off], I[off]] = R[off].transpose(0, 2, 1)
            Rd = R[diag]
            full[I[diag], I[diag]] = 0.5 * (Rd + Rd.transpose(0, 2, 1))
        return full

    def _relation_tensor_backward(self, kind: EdgeKind, g_full: np.ndarray) -> None:
        I, J = self._I, self._J
        gR = g_full[I, J].copy()
        if self.cfg.tie_symmetric:
            off, diag = I != J, I == J
            gR[off] += g_full[J[off], I[off]].transpose(0, 2, 1)
            gd = g_full[I[diag], I[diag]]
            gR[diag] = 0.5 * (gd + gd.transpose(0, 2, 1))
        grads = self.params.grads
        if self.cfg.relation_rank == 0:
            grads[f"rel.{kind.value}.M"] += gR
        else:
            P, Q = self.params[f"rel.{kind.value}.P"], self.params[f"rel.{kind.value}.Q"]
            grads[f"rel.{kind.value}.P"] += gR @ Q
            grads[f"rel.{kind.value}.Q"] += gR.transpose(0, 2, 1) @ P

    def relation_block(self, kind: EdgeKind, w_v, w_u) -> np.ndarray:
        """Block carried from ``u`` to receiver ``v``; ``w_v`` is the left argument."""
        w_v, w_u = np.asarray(w_v, float), np.asarray(w_u, float)
        if w_v.shape != (self.cfg.d_emb,) or w_u.shape != (self.cfg.d_emb,):
            raise DimensionMismatch(f"embeddings must have length {self.cfg.d_emb}")
        return np.einsum("p,ijpq,q->ij", w_v, self.relation_tensor(kind), w_u)

    def assemble(self, ctx: GraphContext, zsl_mask: bool = False) -> PropagationMatrix:
        """Blocks for both directions of every edge.

        With ``zsl_mask`` no block runs from an unseen sender to a seen
        receiver, so seen nodes never hear from unseen ones.
        """
        self._check_ctx(ctx)
        seen = ctx.vocab.seen_count
        triples = []
        for e in ctx.graph.edges:
            for recv, send in ((e.v, e.u), (e.u, e.v)):
                if zsl_mask and recv < seen <= send:
                    continue
                triples.append((recv, send, KIND_CODE[e.kind]))
        triples.sort()
        d = self.cfg.d_hid
        if not triples:
            empty = np.zeros(0, dtype=np.intp)
            return PropagationMatrix(ctx.n, empty, empty, empty, np.zeros((0, d, d)), zsl_mask)
        recv, send, kinds = (np.array(c, dtype=np.intp) for c in zip(*triples))
        E = ctx.emb.vectors
        blocks = np.empty((len(triples), d, d))
        for kind, code in KIND_CODE.items():
            idx = np.flatnonzero(kinds == code)
            if len(idx):
                full = self.relation_tensor(kind)
                blocks[idx] = np.einsum("ep,ijpq,eq->eij", E[recv[idx]], full, E[send[idx]])
        return PropagationMatrix(ctx.n, recv, send, kinds, blocks, zsl_mask)

    # ------------------------------------------------------------- forward

    def _check_ctx(self, ctx: GraphContext):
        if ctx.emb.dim != self.cfg.d_emb:
            raise DimensionMismatch(f"embedding dim {ctx.emb.dim} != d_emb {self.cfg.d_emb}")

    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        X = np.asarray(x, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.ndim != 2 or X.shape[1] != self.cfg.d_feat:
            raise DimensionMismatch(f"features must have length {self.cfg.d_feat}")
        if not np.all(np.isfinite(X)):
            raise NonFiniteValue("features are not finite")
        return X, single

    def _initial(self, X, E):
        p, F = self.params, self.cfg.d_feat
        W1 = p["fi.W1"]
        pre = _lin(X, W1[:, :F])[:, None, :] + _lin(E, W1[:, F:])[None, :, :] + p["fi.b1"]
        a1 = np.tanh(pre)
        h0 = np.tanh(_lin(a1, p["fi.W2"]) + p["fi.b2"])
        return h0, a1

    def initial_beliefs(self, x, ctx: GraphContext) -> BeliefState:
        """Beliefs at t=0 for every node. Single ``x`` gives ``h`` of shape ``(n, d_hid)``."""
        self._check_ctx(ctx)
        X, single = self._as_batch(x)
        h0, _ = self._initial(X, ctx.emb.vectors)
        return BeliefState(0, h0[0] if single else h0)

    def _aggregate(self, A: PropagationMatrix, h: np.ndarray) -> np.ndarray:
        """Sum over incoming blocks of ``block^T h_sender``, per receiver."""
        B, n, d = h.shape
        s = np.zeros((n, B, d))
        if len(A):
            hs = h.transpose(1, 0, 2)[A.senders]  # (e, B, d)
            msg = np.matmul(hs, A.blocks)  # row vector times block == block^T h
            s[A.targets] = np.add.reduceat(msg, A.starts, axis=0)
        return s.transpose(1, 0, 2)

    def _step(self, A: PropagationMatrix, h: np.ndarray) -> tuple[np.ndarray, StepTrace]:
        p = self.params
        u = np.tanh(self._aggregate(A, h))
        z = sigmoid(_lin(u, p["gru.Wz"]) + _lin(h, p["gru.Uz"]) + p["gru.bz"])
        r = sigmoid(_lin(u, p["gru.Wr"]) + _lin(h, p["gru.Ur"]) + p["gru.br"])
        ht = np.tanh(_lin(u, p["gru.Wh"]) + _lin(r * h, p["gru.Uh"]) + p["gru.bh"])
        h_new = (1.0 - z) * h + z * ht
        return h_new, StepTrace(h, u, z, r, ht)

    def propagate_step(self, A: PropagationMatrix, state: BeliefState) -> tuple[BeliefState, StepTrace]:
        h = np.asarray(state.h, dtype=np.float64)
        single = h.ndim == 2
        if single:
            h = h[None]
        if h.shape[1:] != (A.node_count, self.cfg.d_hid):
            raise DimensionMismatch("belief shape does not match the propagation matrix")
        if not np.all(np.isfinite(h)):
            raise NonFiniteValue("belief state is not finite")
        h_new, trace = self._step(A, h)
        if not np.all(np.isfinite(h_new)):
            raise NonFiniteValue(f"belief state became non-finite at t={state.t + 1}")
        if single:
            h_new = h_new[0]
            trace = StepTrace(*(a[0] for a in (trace.h_prev, trace.u, trace.z, trace.r, trace.h_tilde)))
        return BeliefState(state.t + 1, h_new), trace

    def _output(self, h):
        p = self.params
        if self.cfg.fo_hidden:
            a = np.tanh(_lin(h, p["fo.W1"]) + p["fo.b1"])
            return _lin(a, p["fo.W2"])[..., 0] + p["fo.b2"][0], a
        return _lin(h, p["fo.W"])[..., 0] + p["fo.b"][0], None

    def output(self, h) -> np.ndarray:
        """Confidences for a belief array of any leading shape."""
        logits, _ = self._output(np.asarray(h, dtype=np.float64))
        return sigmoid(logits)

    def forward(self, x, ctx: GraphContext, zsl_mask: bool = False) -> ForwardPass:
        self._check_ctx(ctx)
        X, _ = self._as_batch(x)
        E = ctx.emb.vectors
        A = self.assemble(ctx, zsl_mask)
        h0, a1 = self._initial(X, E)
        hs, steps = [h0], []
        for _ in range(self.cfg.T):
            h, st = self._step(A, hs[-1])
            hs.append(h)
            steps.append(st)
        logits, fo_hidden = [], []
        for h in hs:
            lg, a = self._output(h)
            logits.append(lg)
            fo_hidden.append(a)
        logits = np.stack(logits)
        if not np.all(np.isfinite(logits)):
            raise NonFiniteValue("forward pass produced non-finite outputs")
        return ForwardPass(X, E, A, a1, hs, steps, logits, sigmoid(logits), fo_hidden)

    def predict(self, x, ctx: GraphContext, zsl_mask: bool = False) -> np.ndarray:
        """Final-step confidences ``(B, n)``."""
        return self.forward(x, ctx, zsl_mask).final

    # ------------------------------------------------------------ backward

    def backward(self, fp: ForwardPass, grad_p=None, grad_logits=None) -> None:
        """Accumulate parameter gradients into ``self.params.grads``.

        Pass the upstream gradient either w.r.t. the confidences ``p`` or
        (numerically safer near saturation) w.r.t. the pre-sigmoid logits.
        Both have shape ``(T+1, B, n)``.
        """
        if (grad_p is None) == (grad_logits is None):
            raise ValueError("pass exactly one of grad_p, grad_logits")
        if grad_logits is None:
            grad_p = np.asarray(grad_p, dtype=np.float64)
            grad_logits = grad_p * fp.p * (1.0 - fp.p)
        gl = np.asarray(grad_logits, dtype=np.float64)
        if gl.shape != fp.p.shape:
            raise DimensionMismatch(f"upstream gradient shape {gl.shape} != {fp.p.shape}")
        if not np.all(np.isfinite(gl)):
            raise NonFiniteValue("upstream gradient is not finite")

        p, g = self.params, self.params.grads
        T = len(fp.steps)

        # output network, shared over time steps
        gh = []
        for t in range(T + 1):
            h, glt = fp.h[t], gl[t]
            if self.cfg.fo_hidden:
                a = fp.fo_hidden[t]
                g["fo.W2"][0] += np.einsum("bn,bnk->k", glt, a)
                g["fo.b2"][0] += glt.sum()
                gpre = glt[..., None] * p["fo.W2"][0] * (1.0 - a * a)
                g["fo.W1"] += np.einsum("bnk,bnd->kd", gpre, h)
                g["fo.b1"] += gpre.sum(axis=(0, 1))
                gh.append(gpre @ p["fo.W1"])
            else:
                g["fo.W"][0] += np.einsum("bn,bnd->d", glt, h)
                g["fo.b"][0] += glt.sum()
                gh.append(glt[..., None] * p["fo.W"][0])

        A = fp.matrix
        g_blocks = np.zeros_like(A.blocks)
        carry = np.zeros_like(fp.h[0])
        for t in range(T, 0, -1):
            st = fp.steps[t - 1]
            dh = gh[t] + carry
            h, u, z, r, ht = st.h_prev, st.u, st.z, st.r, st.h_tilde
            dz = dh * (ht - h)
            dht = dh * z
            dh_prev = dh * (1.0 - z)

            dpre_h = dht * (1.0 - ht * ht)
            g["gru.Wh"] += np.einsum("bni,bnj->ij", dpre_h, u)
            g["gru.Uh"] += np.einsum("bni,bnj->ij", dpre_h, r * h)
            g["gru.bh"] += dpre_h.sum(axis=(0, 1))
            du = dpre_h @ p["gru.Wh"]
            drh = dpre_h @ p["gru.Uh"]
            dr = drh * h
            dh_prev += drh * r

            dpre_z = dz * z * (1.0 - z)
            g["gru.Wz"] += np.einsum("bni,bnj->ij", dpre_z, u)
            g["gru.Uz"] += np.einsum("bni,bnj->ij", dpre_z, h)
            g["gru.bz"] += dpre_z.sum(axis=(0, 1))
            du += dpre_z @ p["gru.Wz"]
            dh_prev += dpre_z @ p["gru.Uz"]

            dpre_r = dr * r * (1.0 - r)
            g["gru.Wr"] += np.einsum("bni,bnj->ij", dpre_r, u)
            g["gru.Ur"] += np.einsum("bni,bnj->ij", dpre_r, h)
            g["gru.br"] += dpre_r.sum(axis=(0, 1))
            du += dpre_r @ p["gru.Wr"]
            dh_prev += dpre_r @ p["gru.Ur"]

            if len(A):
                ds = (du * (1.0 - u * u)).transpose(1, 0, 2)  # (n, B, d)
                dmsg = ds[A.receivers]  # (e, B, d)
                hs = h.transpose(1, 0, 2)[A.senders]
                g_blocks += np.matmul(hs.transpose(0, 2, 1), dmsg)
                dhs = np.matmul(dmsg, A.blocks.transpose(0, 2, 1))
                dprev_t = np.zeros((h.shape[1],) + h.shape[:1] + h.shape[2:])
                np.add.at(dprev_t, A.senders, dhs)
                dh_prev += dprev_t.transpose(1, 0, 2)
            carry = dh_prev

        # input network
        dh0 = gh[0] + carry
        h0, a1 = fp.h[0], fp.fi_hidden
        dpre2 = dh0 * (1.0 - h0 * h0)
        g["fi.W2"] += np.einsum("bnd,bnk->dk", dpre2, a1)
        g["fi.b2"] += dpre2.sum(axis=(0, 1))
        dpre1 = (dpre2 @ p["fi.W2"]) * (1.0 - a1 * a1)
        F = self.cfg.d_feat
        g["fi.W1"][:, :F] += dpre1.sum(axis=1).T @ fp.x
        g["fi.W1"][:, F:] += dpre1.sum(axis=0).T @ fp.emb
        g["fi.b1"] += dpre1.sum(axis=(0, 1))

        # relation tensors, through the assembled blocks
        if len(A):
            E = fp.emb
            for kind, code in KIND_CODE.items():
                idx = np.flatnonzero(A.kinds == code)
                if len(idx):
                    g_full = np.einsum("eij,ep,eq->ijpq", g_blocks[idx], E[A.receivers[idx]], E[A.senders[idx]])
                    self._relation_tensor_backward(kind, g_full)

        for k, v in g.items():
            if not np.all(np.isfinite(v)):
                raise NonFiniteValue(f"gradient of {k} is not finite")
