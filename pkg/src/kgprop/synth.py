"""Seeded synthetic corpora that stand in for real tagged image collections.

Taxonomy layout (depth in parentheses)::

    entity(1) -> group(2) -> subgroup(3) -> family head(4) -> leaf(5)

Every family contributes its head and ``taxonomy_branching - 1`` leaves as
labels. With the default thresholds this yields super-subordinate edges from
heads to their leaves, positive edges between sibling leaves and negative
edges across groups.

Each instance picks a "scene" group; labels in it are likely, the rest
rare, and members of a family share a random draw with probability
``correlation_strength``. Features are the sum of the active labels'
signatures plus Gaussian noise, except for hidden-signal labels whose
signature is zeroed: those can only be inferred from correlated labels.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from kgprop.errors import InvalidConfig
from kgprop.knowledge_graph import GraphBuildConfig, Taxonomy, TypedGraph, build_typed_graph
from kgprop.semantic_space import EmbeddingTable, LabelVocabulary
from kgprop.training import Dataset

ROOT = "entity"


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_seen: int = 12
    num_unseen: int = 0
    d_feat: int = 16
    d_emb: int = 8
    taxonomy_branching: int = 4
    feature_noise: float = 0.5
    label_density: float = 0.25
    correlation_strength: float = 0.9
    hidden_fraction: float = 0.0
    num_groups: int = 3
    semantic_feature_weight: float = 0.5
    embedding_parent_weight: float = 0.6
    n_train: int = 256
    n_val: int = 128
    n_test: int = 256

    def __post_init__(self):
        if self.num_seen < 2 or self.num_unseen < 0:
            raise InvalidConfig("need num_seen >= 2 and num_unseen >= 0")
        if self.d_feat < 1 or self.d_emb < 1:
            raise InvalidConfig("dimensions must be positive")
        if self.taxonomy_branching < 2:
            raise InvalidConfig("taxonomy_branching must be at least 2")
        if self.feature_noise < 0:
            raise InvalidConfig("feature_noise must be non-negative")
        if not 0.0 < self.label_density < 1.0:
            raise InvalidConfig("label_density must lie in (0, 1)")
        if not 0.0 <= self.correlation_strength <= 1.0:
            raise InvalidConfig("correlation_strength must lie in [0, 1]")
        if not 0.0 <= self.hidden_fraction < 1.0:
            raise InvalidConfig("hidden_fraction must lie in [0, 1)")
        if self.num_groups < 1:
            raise InvalidConfig("num_groups must be positive")
        if not 0.0 <= self.semantic_feature_weight <= 1.0 or not 0.0 <= self.embedding_parent_weight < 1.0:
            raise InvalidConfig("mixing weights must lie in [0, 1)")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise InvalidConfig("every split needs at least one instance")


@dataclass
class SynthCorpus:
    config: SynthConfig
    taxonomy: Taxonomy
    vocab: LabelVocabulary
    emb: EmbeddingTable
    graph: TypedGraph
    train: Dataset
    val: Dataset
    test: Dataset
    hidden: list[int] = field(default_factory=list)
    families: list[list[int]] = field(default_factory=list)
    signatures: np.ndarray | None = None

    def save(self, out_dir) -> dict:
        """Write every artefact plus ``manifest.json``; returns the manifest."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.vocab.save(out / "vocab.txt")
        self.emb.save(out / "embeddings.txt", self.vocab)
        self.taxonomy.save(out / "taxonomy.tsv")
        self.graph.save(out / "graph.json")
        self.train.save(out / "train.txt")
        self.val.save(out / "val.txt")
        self.test.save(out / "test.txt")
        manifest = {
            "vocab": "vocab.txt",
            "embeddings": "embeddings.txt",
            "taxonomy": "taxonomy.tsv",
            "graph": "graph.json",
            "train": "train.txt",
            "val": "val.txt",
            "test": "test.txt",
            "d_emb": self.emb.dim,
            "graph_build": {"theta_pos": 0.8, "theta_neg": 0.3},
            "synth": asdict(self.config),
            "hidden_labels": [self.vocab.labels[i] for i in self.hidden],
        }
        manifest["manifest_hash"] = manifest_hash(manifest)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
        return manifest


def manifest_hash(obj: dict) -> str:
    body = {k: v for k, v in obj.items() if k != "manifest_hash"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def _unit(rng, d):
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def _mix(rng, parent, weight):
    v = weight * parent + math.sqrt(1.0 - weight**2) * _unit(rng, parent.shape[0])
    return v / np.linalg.norm(v)


def _family_sizes(total: int, b: int) -> list[int]:
    sizes = [b] * (total // b)
    rest = total % b
    if rest >= 2 or not sizes:
        sizes.append(rest)
    elif rest == 1:
        sizes[-1] += 1
    return [s for s in sizes if s > 0]


def synth_generate(cfg: SynthConfig) -> SynthCorpus:
    rng = np.random.default_rng(cfg.seed)
    total = cfg.num_seen + cfg.num_unseen
    sizes = _family_sizes(total, cfg.taxonomy_branching)

    # taxonomy + per-concept embeddings
    edges = []
    vec = {ROOT: _unit(rng, cfg.d_emb)}
    w = cfg.embedding_parent_weight
    groups = [f"g{k}" for k in range(min(cfg.num_groups, len(sizes)))]
    for g in groups:
        edges.append((g, ROOT))
        vec[g] = _mix(rng, vec[ROOT], w)
        for s in range(2):
            sub = f"{g}s{s}"
            edges.append((sub, g))
            vec[sub] = _mix(rng, vec[g], w)
    families_concepts = []
    family_group = []
    for f, size in enumerate(sizes):
        gi = f % len(groups)
        sub = f"{groups[gi]}s{(f // len(groups)) % 2}"
        head = f"{sub}f{f}"
        edges.append((head, sub))
        vec[head] = _mix(rng, vec[sub], w)
        members = [head]
        for j in range(1, size):
            leaf = f"{head}l{j}"
            edges.append((leaf, head))
            vec[leaf] = _mix(rng, vec[head], w)
            members.append(leaf)
        families_concepts.append(members)
        family_group.append(gi)
    tax = Taxonomy(edges)

    # unseen: one leaf from each of num_unseen distinct families
    if cfg.num_unseen > len(sizes):
        raise InvalidConfig("more unseen labels than families; lower taxonomy_branching")
    unseen_set = set()
    for f in sorted(rng.choice(len(sizes), size=cfg.num_unseen, replace=False)):
        leaves = families_concepts[f][1:]
        unseen_set.add(leaves[rng.integers(len(leaves))])
    ordered = [c for fam in families_concepts for c in fam]
    seen_labels = [c for c in ordered if c not in unseen_set]
    unseen_labels = [c for c in ordered if c in unseen_set]
    vocab = LabelVocabulary.from_split(seen_labels, unseen_labels)
    index = {c: i for i, c in enumerate(vocab.labels)}
    emb = EmbeddingTable(np.stack([vec[c] for c in vocab.labels]))
    graph = build_typed_graph(tax, vocab, None, GraphBuildConfig())

    families = [[index[c] for c in fam] for fam in families_concepts]
    label_family = np.empty(total, dtype=np.intp)
    label_group = np.empty(total, dtype=np.intp)
    for f, fam in enumerate(families):
        label_family[fam] = f
        label_group[fam] = family_group[f]

    # hidden-signal labels: never a family's last visible member
    n_hidden = int(round(cfg.hidden_fraction * total))
    hidden: list[int] = []
    visible_left = {f: len(fam) for f, fam in enumerate(families)}
    for v in rng.permutation(total):
        if len(hidden) >= n_hidden:
            break
        f = label_family[v]
        if visible_left[f] > 1:
            hidden.append(int(v))
            visible_left[f] -= 1
    hidden.sort()

    # feature signatures, partly grounded in the embedding space
    proj = rng.normal(size=(cfg.d_feat, cfg.d_emb)) / math.sqrt(cfg.d_emb)
    sig = np.empty((total, cfg.d_feat))
    a = cfg.semantic_feature_weight
    for v in range(total):
        sem = proj @ emb.vectors[v]
        sem /= np.linalg.norm(sem)
        s = a * sem + math.sqrt(1.0 - a * a) * _unit(rng, cfg.d_feat)
        sig[v] = s / np.linalg.norm(s)
    sig_visible = sig.copy()
    sig_visible[hidden] = 0.0

    n_all = cfg.n_train + cfg.n_val + cfg.n_test
    Y = sample_labels(rng, n_all, label_group, label_family, len(families), len(groups),
                      cfg.label_density, cfg.correlation_strength)
    X = Y @ sig_visible + cfg.feature_noise * rng.normal(size=(n_all, cfg.d_feat))

    s = cfg.num_seen
    tr = slice(0, cfg.n_train)
    va = slice(cfg.n_train, cfg.n_train + cfg.n_val)
    te = slice(cfg.n_train + cfg.n_val, n_all)
    return SynthCorpus(
        cfg, tax, vocab, emb, graph,
        Dataset(X[tr], Y[tr, :s]), Dataset(X[va], Y[va, :s]), Dataset(X[te], Y[te]),
        hidden, families, sig,
    )


def sample_labels(rng, n, label_group, label_family, n_families, n_groups, density, strength):
    """Correlated binary label matrix ``(n, L)``.

    Label marginals are ``density`` on average for any ``strength``; at
    ``strength = 0`` labels are independent.
    """
    L = len(label_group)
    scene = rng.integers(n_groups, size=n)
    in_scene = label_group[None, :] == scene[:, None]
    p = (1.0 - strength) * density + strength * min(1.0, density * n_groups) * in_scene
    own = rng.uniform(size=(n, L))
    shared = rng.uniform(size=(n, n_families))[:, label_family]
    use_shared = rng.uniform(size=(n, L)) < strength
    draw = np.where(use_shared, shared, own)
    return (draw < p).astype(np.int8)
