"""Knowledge-graph embeddings via a trilinear (Tucker-style) scoring model.

Each entity and relation gets a d_kg vector and the graph shares one learned
core tensor; the score of a triplet is the trilinear contraction of the core
with the three vectors. Training scores every (head, relation) query against
all entities at once and optimizes a multi-target binary cross-entropy with
label smoothing, so observed tails are pushed above the rest. Embeddings are
trained once and consumed read-only by the denoiser.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .ukg import UrbanKG
from .blobio import atomic_write_bytes

logger = logging.getLogger(__name__)

HEADER_FMT = "flowgen-kge 1 d_kg={d} entities={e} relations={r}\n"


@dataclass
class KGEConfig:
    d_kg: int = 32
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    label_smoothing: float = 0.1
    dropout: float = 0.2
    seed: int = 0


def tucker_score(e_h: np.ndarray, e_r: np.ndarray, e_t: np.ndarray, core: np.ndarray) -> float:
    """Trilinear contraction sum_ijk core[i,j,k] * h[i] * r[j] * t[k]."""
    e_h, e_r, e_t, core = (np.asarray(a, dtype=float) for a in (e_h, e_r, e_t, core))
    d = core.shape[0]
    if core.shape != (d, d, d) or e_h.shape != (d,) or e_r.shape != (d,) or e_t.shape != (d,):
        raise ValueError("dimension mismatch between core and embedding vectors")
    return float(np.einsum("ijk,i,j,k->", core, e_h, e_r, e_t))


@dataclass
class KGEmbeddingSet:
    entity_ids: list[str]
    relation_names: list[str]
    entity_vecs: np.ndarray    # (n_entities, d_kg) float32
    relation_vecs: np.ndarray  # (n_relations, d_kg) float32
    core: np.ndarray           # (d_kg, d_kg, d_kg) float32
    _ent_index: dict = field(init=False, repr=False)
    _rel_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._ent_index = {e: i for i, e in enumerate(self.entity_ids)}
        self._rel_index = {r: i for i, r in enumerate(self.relation_names)}

    @property
    def d_kg(self) -> int:
        return self.entity_vecs.shape[1]

    def vector(self, entity_id: str) -> np.ndarray:
        try:
            return self.entity_vecs[self._ent_index[entity_id]]
        except KeyError:
            raise KeyError(f"no embedding for entity {entity_id!r}") from None

    def relation_vector(self, name: str) -> np.ndarray:
        try:
            return self.relation_vecs[self._rel_index[name]]
        except KeyError:
            raise KeyError(f"no embedding for relation {name!r}") from None

    def score(self, head: str, relation: str, tail: str) -> float:
        return tucker_score(self.vector(head), self.relation_vector(relation),
                            self.vector(tail), self.core)

    def save(self, path) -> None:
        """Plain-text header followed by little-endian float32 payload:
        entity vectors in entity order, then relation vectors, then the core.
        An entity/relation order sidecar is written next to the binary."""
        header = HEADER_FMT.format(d=self.d_kg, e=len(self.entity_ids),
                                   r=len(self.relation_names)).encode("ascii")
        payload = (self.entity_vecs.astype("<f4").tobytes()
                   + self.relation_vecs.astype("<f4").tobytes()
                   + self.core.astype("<f4").tobytes())
        atomic_write_bytes(path, header + payload)
        order = "".join(f"entity\t{e}\n" for e in self.entity_ids)
        order += "".join(f"relation\t{r}\n" for r in self.relation_names)
        atomic_write_bytes(os.fspath(path) + ".order.tsv", order.encode("utf-8"))

    @classmethod
    def load(cls, path) -> "KGEmbeddingSet":
        with open(path, "rb") as fh:
            header = fh.readline().decode("ascii")
            parts = dict(kv.split("=") for kv in header.strip().split()[2:])
            d, n_e, n_r = int(parts["d_kg"]), int(parts["entities"]), int(parts["relations"])
            raw = fh.read()
        need = (n_e * d + n_r * d + d ** 3) * 4
        if len(raw) != need:
            raise ValueError(f"{path}: payload is {len(raw)} bytes, expected {need}")
        flat = np.frombuffer(raw, dtype="<f4")
        entity_vecs = flat[: n_e * d].reshape(n_e, d).copy()
        relation_vecs = flat[n_e * d: (n_e + n_r) * d].reshape(n_r, d).copy()
        core = flat[(n_e + n_r) * d:].reshape(d, d, d).copy()
        entity_ids, relation_names = [], []
        with open(os.fspath(path) + ".order.tsv", encoding="utf-8") as fh:
            for line in fh:
                kind, name = line.rstrip("\n").split("\t")
                (entity_ids if kind == "entity" else relation_names).append(name)
        return cls(entity_ids, relation_names, entity_vecs, relation_vecs, core)


class TuckerScorer(nn.Module):
    """Scores all candidate tails for a batch of (head, relation) queries."""

    def __init__(self, n_entities: int, n_relations: int, d_kg: int, dropout: float):
        super().__init__()
        self.entity = nn.Embedding(n_entities, d_kg)
        self.relation = nn.Embedding(n_relations, d_kg)
        self.core = nn.Parameter(torch.empty(d_kg, d_kg, d_kg))
        self.dropout = nn.Dropout(dropout)
        nn.init.uniform_(self.entity.weight, -0.05, 0.05)
        nn.init.uniform_(self.relation.weight, -0.05, 0.05)
        nn.init.normal_(self.core, std=0.1)

    def forward(self, head_idx: torch.Tensor, rel_idx: torch.Tensor) -> torch.Tensor:
        e_h = self.entity(head_idx)
        e_r = self.relation(rel_idx)
        v = torch.einsum("ijk,bi,bj->bk", self.core, e_h, e_r)
        v = self.dropout(v)
        return v @ self.entity.weight.t()


def _initial_scorer(kg: UrbanKG, config: KGEConfig) -> tuple[TuckerScorer, list[str], list[str]]:
    entity_ids = kg.entity_ids()
    relation_names = kg.relation_names()
    torch.manual_seed(config.seed)
    model = TuckerScorer(len(entity_ids), len(relation_names), config.d_kg, config.dropout)
    return model, entity_ids, relation_names


def train_kg_embeddings(kg: UrbanKG, config: KGEConfig | None = None
                        ) -> tuple[KGEmbeddingSet, list[float]]:
    """Fit embeddings to the graph; returns (embeddings, per-epoch losses).

    Deterministic for a fixed seed on a single-threaded run. Relations with no
    facts keep their initialization (warned about).
    """
    config = config or KGEConfig()
    if len(kg.facts) == 0:
        raise ValueError("cannot train embeddings on an empty KG")
    model, entity_ids, relation_names = _initial_scorer(kg, config)
    ent_index = {e: i for i, e in enumerate(entity_ids)}
    rel_index = {r: i for i, r in enumerate(relation_names)}

    used = {r for _, r, _ in kg.facts}
    for name in relation_names:
        if name not in used:
            logger.warning("relation %s has no facts; vector left at initialization", name)

    targets: dict[tuple[int, int], list[int]] = {}
    for h, r, t in sorted(kg.facts):
        targets.setdefault((ent_index[h], rel_index[r]), []).append(ent_index[t])
    queries = sorted(targets)
    n_entities = len(entity_ids)

    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    bce = nn.BCEWithLogitsLoss()
    rng = np.random.default_rng(config.seed)
    ls = config.label_smoothing
    losses: list[float] = []
    model.train()
    for _ in range(config.epochs):
        order = rng.permutation(len(queries))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [queries[i] for i in order[start:start + config.batch_size]]
            h_idx = torch.tensor([q[0] for q in batch], dtype=torch.long)
            r_idx = torch.tensor([q[1] for q in batch], dtype=torch.long)
            y = torch.zeros(len(batch), n_entities)
            for row, q in enumerate(batch):
                y[row, targets[q]] = 1.0
            y = y * (1.0 - ls) + ls / n_entities
            logits = model(h_idx, r_idx)
            loss = bce(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(batch)
            count += len(batch)
        losses.append(total / count)
    model.eval()
    embs = KGEmbeddingSet(
        entity_ids,
        relation_names,
        model.entity.weight.detach().numpy().astype(np.float32).copy(),
        model.relation.weight.detach().numpy().astype(np.float32).copy(),
        model.core.detach().numpy().astype(np.float32).copy(),
    )
    return embs, losses


def region_embedding_matrix(embs: KGEmbeddingSet, region_ids) -> np.ndarray:
    """Rows of entity embeddings in the given region order."""
    return np.stack([embs.vector(rid) for rid in region_ids]) if len(region_ids) \
        else np.zeros((0, embs.d_kg), dtype=np.float32)


def _all_tail_scores(embs: KGEmbeddingSet, h_idx: int, r_idx: int) -> np.ndarray:
    v = np.einsum("ijk,i,j->k", embs.core.astype(np.float64),
                  embs.entity_vecs[h_idx].astype(np.float64),
                  embs.relation_vecs[r_idx].astype(np.float64))
    return v @ embs.entity_vecs.astype(np.float64).T


def mean_filtered_rank(embs: KGEmbeddingSet, kg: UrbanKG) -> float:
    """Mean rank of each fact's true tail with other known tails filtered out."""
    ent_index = embs._ent_index
    rel_index = embs._rel_index
    known: dict[tuple[int, int], set[int]] = {}
    facts = sorted(kg.facts)
    for h, r, t in facts:
        known.setdefault((ent_index[h], rel_index[r]), set()).add(ent_index[t])
    ranks = []
    cache: dict[tuple[int, int], np.ndarray] = {}
    for h, r, t in facts:
        q = (ent_index[h], rel_index[r])
        if q not in cache:
            cache[q] = _all_tail_scores(embs, *q)
        scores = cache[q].copy()
        t_idx = ent_index[t]
        s_true = scores[t_idx]
        for other in known[q]:
            if other != t_idx:
                scores[other] = -np.inf
        ranks.append(1 + int(np.sum(scores > s_true)))
    return float(np.mean(ranks))


def shuffled_baseline_rank(embs: KGEmbeddingSet, kg: UrbanKG, seed: int = 0) -> float:
    """Same ranking metric with entity vectors permuted; the no-knowledge bar."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(embs.entity_ids))
    shuffled = KGEmbeddingSet(embs.entity_ids, embs.relation_names,
                              embs.entity_vecs[perm].copy(),
                              embs.relation_vecs.copy(), embs.core.copy())
    return mean_filtered_rank(shuffled, kg)
