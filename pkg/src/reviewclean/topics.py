"""Semi-automated quality estimation over generated comments: cluster the
embedding space, weight terms per cluster, pick representative comments for
manual scoring, and propagate those scores to whole clusters.

Information scores live on 1..5, relevance scores on 1..3; overall scores
are cluster-size-weighted means of the per-cluster means.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from ._kernels import average_linkage_merges

DEFAULT_CLUSTER_COUNT = 50
DEFAULT_TOP_TERMS = 10
INFORMATION_RANGE = (1.0, 5.0)
RELEVANCE_RANGE = (1.0, 3.0)

_NPMI_EPS = 1e-12


class TopicsError(Exception):
    pass


class TooFewPoints(TopicsError):
    pass


class MissingAnnotation(TopicsError):
    def __init__(self, cluster_id: int, representative_id: str = ""):
        detail = f" (representative {representative_id!r})" if representative_id else ""
        super().__init__(f"cluster {cluster_id} lacks annotations{detail}")
        self.cluster_id = cluster_id
        self.representative_id = representative_id


def cosine_distance_matrix(embeddings: np.ndarray) -> np.ndarray:
    """Pairwise cosine distances of unit-normalized row vectors."""
    emb = np.asarray(embeddings, dtype=np.float64)
    dist = 1.0 - emb @ emb.T
    np.clip(dist, 0.0, 2.0, out=dist)
    np.fill_diagonal(dist, 0.0)
    return dist


@dataclass
class ClusterResult:
    labels: np.ndarray  # point -> cluster id in 0..k-1
    centroids: np.ndarray  # (k, dim), member mean re-normalized
    merge_history: list  # (slot_a, slot_b, linkage distance)


def cluster(embeddings: np.ndarray, k: int, engine: Optional[str] = None) -> ClusterResult:
    """Agglomerative average-linkage clustering over cosine distance.

    Merging starts from singletons and stops at ``k`` clusters; distance
    ties are broken by the lowest pair of cluster indices, so the result is
    deterministic in the input order. Cluster ids are assigned 0..k-1 by
    each cluster's smallest member index.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2:
        raise ValueError("embeddings must be a 2-d array")
    n = emb.shape[0]
    if k < 1:
        raise ValueError("k must be at least 1")
    if n < k:
        raise TooFewPoints(f"need at least {k} points, got {n}")

    dist = cosine_distance_matrix(emb)
    merge_a, merge_b, merge_d, slot_of_point = average_linkage_merges(dist, k, engine)

    slots = sorted(set(int(s) for s in slot_of_point))
    slot_to_label = {slot: label for label, slot in enumerate(slots)}
    labels = np.array([slot_to_label[int(s)] for s in slot_of_point], dtype=np.int64)

    centroids = np.empty((k, emb.shape[1]), dtype=np.float64)
    for label in range(k):
        mean = emb[labels == label].mean(axis=0)
        norm = np.linalg.norm(mean)
        centroids[label] = mean / norm if norm > 1e-12 else mean
    history = [
        (int(a), int(b), float(d)) for a, b, d in zip(merge_a, merge_b, merge_d)
    ]
    return ClusterResult(labels=labels, centroids=centroids, merge_history=history)


def ctfidf(cluster_tokens: Mapping[int, Sequence[Sequence[str]]]) -> dict:
    """Class-based TF-IDF weights per cluster.

    For cluster c and term t: ``tf(t, c) * log(1 + A / f(t))`` where tf
    counts t in the concatenation of c's comments, f(t) is the total count
    of t across all clusters, and A is the average token count per cluster.
    Terms absent from a cluster have weight 0 (and are omitted).
    """
    if not cluster_tokens:
        raise TopicsError("no clusters given")
    tf: dict = {}
    corpus_counts: Counter = Counter()
    total_tokens = 0
    for cid, docs in cluster_tokens.items():
        counts: Counter = Counter()
        for doc in docs:
            counts.update(doc)
        tf[cid] = counts
        corpus_counts.update(counts)
        total_tokens += sum(counts.values())
    avg_tokens = total_tokens / len(cluster_tokens)

    weights: dict = {}
    for cid, counts in tf.items():
        weights[cid] = {
            term: count * math.log(1.0 + avg_tokens / corpus_counts[term])
            for term, count in counts.items()
        }
    return weights


def top_terms(term_weights: Mapping[str, float], n: int = DEFAULT_TOP_TERMS) -> list:
    """Highest-weighted terms, ties broken alphabetically for determinism."""
    ranked = sorted(term_weights.items(), key=lambda kv: (-kv[1], kv[0]))
    return [term for term, _ in ranked[:n]]


def representatives(
    member_ids: Sequence[str],
    member_embeddings: np.ndarray,
    centroid: np.ndarray,
    top_n: int = 3,
) -> list:
    """The ``top_n`` members most cosine-similar to the centroid.

    Ties keep the members' listed order. Returns all members when the
    cluster is smaller than ``top_n``.
    """
    if len(member_ids) == 0:
        raise TopicsError("empty cluster")
    emb = np.asarray(member_embeddings, dtype=np.float64)
    sims = emb @ np.asarray(centroid, dtype=np.float64)
    order = np.argsort(-sims, kind="stable")
    return [member_ids[int(i)] for i in order[:top_n]]


@dataclass
class CoherenceResult:
    per_cluster: dict  # cluster id -> float or None when flagged
    mean: float
    insufficient: list  # cluster ids excluded for having < 2 terms


def npmi(term_a: str, term_b: str, doc_sets: Sequence[frozenset], doc_freq: Mapping[str, int]) -> float:
    """Normalized PMI of two terms under document-level co-occurrence.

    A pair that never co-occurs scores the limiting value -1 exactly; a
    pair present in every document carries no information and scores 0.
    Otherwise epsilon-guarded logs keep the value inside [-1, 1].
    """
    n_docs = len(doc_sets)
    joint = sum(1 for doc in doc_sets if term_a in doc and term_b in doc)
    if joint == 0:
        return -1.0
    p_joint = joint / n_docs
    p_a = doc_freq.get(term_a, 0) / n_docs
    p_b = doc_freq.get(term_b, 0) / n_docs
    if p_joint >= 1.0:
        return 0.0
    value = math.log((p_joint + _NPMI_EPS) / (p_a * p_b + _NPMI_EPS)) / -math.log(
        p_joint + _NPMI_EPS
    )
    return min(1.0, max(-1.0, value))


def coherence(
    top_terms_by_cluster: Mapping[int, Sequence[str]],
    documents: Sequence[Sequence[str]],
) -> CoherenceResult:
    """Mean pairwise NPMI of each cluster's top terms over the corpus.

    Clusters with fewer than two terms are flagged and excluded from the
    reported mean.
    """
    doc_sets = [frozenset(doc) for doc in documents]
    doc_freq: Counter = Counter()
    for doc in doc_sets:
        doc_freq.update(doc)

    per_cluster: dict = {}
    insufficient: list = []
    for cid, terms in top_terms_by_cluster.items():
        terms = list(dict.fromkeys(terms))
        if len(terms) < 2:
            per_cluster[cid] = None
            insufficient.append(cid)
            continue
        pair_scores = [
            npmi(terms[i], terms[j], doc_sets, doc_freq)
            for i in range(len(terms))
            for j in range(i + 1, len(terms))
        ]
        per_cluster[cid] = sum(pair_scores) / len(pair_scores)
    scored = [v for v in per_cluster.values() if v is not None]
    mean = sum(scored) / len(scored) if scored else float("nan")
    return CoherenceResult(per_cluster=per_cluster, mean=mean, insufficient=insufficient)


@dataclass
class TopicModel:
    k: int
    ids: tuple  # instance ids, input order
    assignment: dict  # instance id -> cluster id
    cluster_members: dict  # cluster id -> tuple of instance ids, input order
    centroids: np.ndarray
    term_weights: dict  # cluster id -> {term: weight}
    representatives: dict  # cluster id -> tuple of instance ids
    coherence: CoherenceResult
    merge_history: list = field(default_factory=list)

    def cluster_sizes(self) -> dict:
        return {cid: len(members) for cid, members in self.cluster_members.items()}


def build_topic_model(
    ids: Sequence[str],
    token_lists: Sequence[Sequence[str]],
    embeddings: np.ndarray,
    k: int = DEFAULT_CLUSTER_COUNT,
    n_top_terms: int = DEFAULT_TOP_TERMS,
    n_representatives: int = 3,
    engine: Optional[str] = None,
) -> TopicModel:
    """Cluster comments and derive terms, representatives, and coherence."""
    ids = list(ids)
    if not (len(ids) == len(token_lists) == len(embeddings)):
        raise TopicsError("ids, token lists, and embeddings must align")
    result = cluster(embeddings, k, engine=engine)

    members: dict = {cid: [] for cid in range(k)}
    member_rows: dict = {cid: [] for cid in range(k)}
    for row, (instance_id, label) in enumerate(zip(ids, result.labels)):
        members[int(label)].append(instance_id)
        member_rows[int(label)].append(row)

    cluster_tokens = {
        cid: [token_lists[row] for row in rows] for cid, rows in member_rows.items()
    }
    weights = ctfidf(cluster_tokens)
    terms = {cid: top_terms(weights[cid], n_top_terms) for cid in weights}
    reps = {
        cid: tuple(
            representatives(
                members[cid],
                np.asarray(embeddings)[member_rows[cid]],
                result.centroids[cid],
                top_n=n_representatives,
            )
        )
        for cid in members
    }
    coh = coherence(terms, token_lists)
    return TopicModel(
        k=k,
        ids=tuple(ids),
        assignment={instance_id: int(label) for instance_id, label in zip(ids, result.labels)},
        cluster_members={cid: tuple(m) for cid, m in members.items()},
        centroids=result.centroids,
        term_weights=weights,
        representatives=reps,
        coherence=coh,
        merge_history=result.merge_history,
    )


@dataclass
class QualityScores:
    per_cluster_information: dict
    per_cluster_relevance: dict
    overall_information: float
    overall_relevance: float

    def to_dict(self) -> dict:
        return {
            "per_cluster": {
                cid: {
                    "information": self.per_cluster_information[cid],
                    "relevance": self.per_cluster_relevance[cid],
                }
                for cid in sorted(self.per_cluster_information)
            },
            "overall_information": self.overall_information,
            "overall_relevance": self.overall_relevance,
        }


def propagate_scores(
    cluster_members: Mapping[int, Sequence[str]],
    cluster_representatives: Mapping[int, Sequence[str]],
    annotations: Mapping[str, tuple],
) -> QualityScores:
    """Spread representative annotations to their whole clusters.

    ``annotations`` maps representative id to (information, relevance).
    Each cluster's score is the mean over its representatives; the overall
    score weights clusters by size. Any representative without an
    annotation raises :class:`MissingAnnotation`.
    """
    info: dict = {}
    rel: dict = {}
    total = 0
    weighted_info = 0.0
    weighted_rel = 0.0
    for cid, members in cluster_members.items():
        reps = cluster_representatives.get(cid, ())
        if not reps:
            raise MissingAnnotation(cid)
        values = []
        for rep in reps:
            if rep not in annotations:
                raise MissingAnnotation(cid, rep)
            values.append(annotations[rep])
        for information, relevance in values:
            if not INFORMATION_RANGE[0] <= information <= INFORMATION_RANGE[1]:
                raise TopicsError(f"information score {information} outside 1..5")
            if not RELEVANCE_RANGE[0] <= relevance <= RELEVANCE_RANGE[1]:
                raise TopicsError(f"relevance score {relevance} outside 1..3")
        info[cid] = sum(v[0] for v in values) / len(values)
        rel[cid] = sum(v[1] for v in values) / len(values)
        size = len(members)
        total += size
        weighted_info += info[cid] * size
        weighted_rel += rel[cid] * size
    if total == 0:
        raise TopicsError("no cluster members")
    return QualityScores(
        per_cluster_information=info,
        per_cluster_relevance=rel,
        overall_information=weighted_info / total,
        overall_relevance=weighted_rel / total,
    )
