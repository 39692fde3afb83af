"""Retrieval evaluation (CMC, mAP) and diagnostic dumps.

Protocol: rank the gallery by descending cosine similarity with stable
ascending-index tie-breaking, excluding gallery entries that share both
identity and camera with the query (the query itself included). Queries
left with no relevant gallery entry are excluded from the averages and
reported, never silently dropped.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .data import Dataset, SequenceSample, resize_masks
from .errors import ContractViolation, DimensionError

log = logging.getLogger(__name__)

CHANNEL_MAP_LIMIT = 64


@dataclass
class RetrievalResult:
    rankings: list          # per query: kept gallery indices, best first
    relevance: list         # per query: matching flags aligned to rankings
    aps: np.ndarray         # average precision per valid query
    cmc: np.ndarray         # cmc[k-1] = fraction matched within top k
    map: float
    skipped: list           # query indices with no relevant gallery entries


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ContractViolation(f"zero-norm {what} embedding")
    return x / norms


def rank_gallery(query_emb: np.ndarray, gallery_emb: np.ndarray,
                 query_ids=None, query_cams=None,
                 gallery_ids=None, gallery_cams=None) -> list:
    """Per-query gallery indices by descending cosine similarity.

    With identity/camera metadata, same-identity same-camera entries are
    removed from each query's ranking.
    """
    if gallery_emb.shape[0] == 0:
        raise ContractViolation("empty gallery")
    if query_emb.shape[1] != gallery_emb.shape[1]:
        raise DimensionError(
            f"embedding dims differ: {query_emb.shape} vs {gallery_emb.shape}")
    q = _unit_rows(np.asarray(query_emb, dtype=np.float64), "query")
    g = _unit_rows(np.asarray(gallery_emb, dtype=np.float64), "gallery")
    sim = q @ g.T
    order = np.argsort(-sim, axis=1, kind="stable")
    if query_ids is None:
        return [order[i] for i in range(len(q))]
    query_ids = np.asarray(query_ids)
    query_cams = np.asarray(query_cams)
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    out = []
    for i in range(len(q)):
        ranked = order[i]
        junk = (gallery_ids[ranked] == query_ids[i]) & \
               (gallery_cams[ranked] == query_cams[i])
        out.append(ranked[~junk])
    return out


def mean_average_precision(rankings: list, relevance: list) -> float:
    """Mean over queries of (1/#relevant) * sum of precision at match ranks."""
    aps, skipped = _average_precisions(rankings, relevance)
    if skipped:
        log.warning("mAP: %d queries had no relevant gallery entries: %s",
                    len(skipped), skipped[:8])
    if len(aps) == 0:
        raise ContractViolation("no query has a relevant gallery entry")
    return float(np.mean(aps))


def _average_precisions(rankings, relevance):
    aps = []
    skipped = []
    for qi, (ranked, rel) in enumerate(zip(rankings, relevance)):
        rel = np.asarray(rel, dtype=bool)
        n_rel = int(rel.sum())
        if n_rel == 0:
            skipped.append(qi)
            continue
        hits = np.flatnonzero(rel)
        precisions = (np.arange(1, n_rel + 1)) / (hits + 1)
        aps.append(precisions.mean())
    return np.asarray(aps), skipped


def cmc_curve(rankings: list, relevance: list, max_k: int) -> np.ndarray:
    """cmc[k-1] = fraction of (valid) queries with a match in the top k."""
    hits = np.zeros(max_k)
    valid = 0
    for ranked, rel in zip(rankings, relevance):
        rel = np.asarray(rel, dtype=bool)
        if not rel.any():
            continue
        valid += 1
        first = int(np.flatnonzero(rel)[0])
        if first < max_k:
            hits[first:] += 1
    if valid == 0:
        raise ContractViolation("no query has a relevant gallery entry")
    return hits / valid


def evaluate_retrieval(query_emb, gallery_emb, query_ids, query_cams,
                       gallery_ids, gallery_cams, max_k: int = 10) -> RetrievalResult:
    """Full protocol: ranking, per-query AP, CMC, and skip reporting."""
    rankings = rank_gallery(query_emb, gallery_emb, query_ids, query_cams,
                            gallery_ids, gallery_cams)
    gallery_ids = np.asarray(gallery_ids)
    relevance = [gallery_ids[r] == query_ids[i] for i, r in enumerate(rankings)]
    aps, skipped = _average_precisions(rankings, relevance)
    if skipped:
        log.warning("retrieval: skipping %d matchless queries %s",
                    len(skipped), skipped[:8])
    if len(aps) == 0:
        raise ContractViolation("no query has a relevant gallery entry")
    max_k = min(max_k, max(len(r) for r in rankings))
    cmc = cmc_curve(rankings, relevance, max_k)
    return RetrievalResult(rankings, relevance, aps, cmc, float(aps.mean()), skipped)


# ---------------------------------------------------------------------------
# model-level helpers
# ---------------------------------------------------------------------------

def embed_sequences(model, sequences: list, chunk: int = 8):
    """Evaluation-mode embeddings for full sequences.

    Returns (embeddings, identities, cameras). Sequences must share a
    frame count (true for generated datasets).
    """
    embs = []
    for lo in range(0, len(sequences), chunk):
        batch = np.stack([s.frames for s in sequences[lo:lo + chunk]])
        embs.append(model.embed(batch))
    ids = np.asarray([s.identity for s in sequences])
    cams = np.asarray([s.camera for s in sequences])
    return np.concatenate(embs), ids, cams


def evaluate_identities(model, dataset: Dataset, identities,
                        max_k: int = 10) -> RetrievalResult:
    """Camera-0 sequences query the full gallery of the given identities."""
    seqs = [s for s in dataset.sequences if s.identity in set(identities)]
    emb, ids, cams = embed_sequences(model, seqs)
    query = cams == 0
    return evaluate_retrieval(emb[query], emb, ids[query], cams[query],
                              ids, cams, max_k)


def attention_iou(attention: np.ndarray, masks: np.ndarray,
                  threshold: float = 0.5) -> float:
    """Mean IoU of thresholded attention maps against part masks.

    Masks are area-resized to the attention resolution first; both sides
    are thresholded at 0.5.
    """
    if attention.shape[:-1] != masks.shape[:-1]:
        masks = resize_masks(masks, attention.shape[-3:-1])
    if attention.shape != masks.shape:
        raise DimensionError(f"attention {attention.shape} vs masks {masks.shape}")
    pred = attention >= threshold
    gt = masks >= threshold
    ious = []
    for n in range(attention.shape[-1]):
        union = (pred[..., n] | gt[..., n]).sum()
        if union == 0:
            continue
        inter = (pred[..., n] & gt[..., n]).sum()
        ious.append(inter / union)
    return float(np.mean(ious)) if ious else 0.0


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def _write_csv(path: Path, matrix: np.ndarray) -> None:
    try:
        np.savetxt(path, matrix, fmt="%.6g", delimiter=",")
    except OSError as e:
        raise OSError(f"failed writing diagnostic {path}: {e}") from e


def _subsample(m: np.ndarray, limit: int = CHANNEL_MAP_LIMIT) -> np.ndarray:
    step = max(1, int(np.ceil(m.shape[0] / limit)))
    return m[::step, ::step]


def dump_diagnostics(model, sequence: SequenceSample, out_dir) -> list:
    """Write relation/attention maps of one sequence as CSV + raw tensors.

    Per IAU stage: attention maps (one CSV per frame, H*W rows x N
    columns), spatial maps per frame, temporal maps per part, the
    normalized relation map, and the channel relation map subsampled to
    at most 64x64. Raw tensor files accompany every CSV for bit-exact
    inspection.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = sequence.frames[None]  # single-sequence batch
    from .tensor import no_grad
    with no_grad():
        _, _, traces = model.forward(frames, training=False)
    written = []

    def emit(name: str, array: np.ndarray, csv_matrix=None):
        raw = out / f"{name}.iaut"
        tensorio.write_tensor(raw, array.astype(np.float32))
        written.append(raw)
        if csv_matrix is not None:
            csv = out / f"{name}.csv"
            _write_csv(csv, csv_matrix)
            written.append(csv)

    for idx, trace in sorted(traces.items()):
        tag = f"stage{idx}"
        st = trace.stiau
        if st is not None:
            tn = st.attention
            if tn is not None:
                a = tn.data[0]                       # (T,h,w,N)
                emit(f"{tag}_attention", a)
                for t in range(a.shape[0]):
                    _write_csv(out / f"{tag}_attention_f{t}.csv",
                               a[t].reshape(-1, a.shape[-1]))
                    written.append(out / f"{tag}_attention_f{t}.csv")
            s = st.spatial.data[0]                   # (T,N,N)
            emit(f"{tag}_spatial", s)
            for t in range(s.shape[0]):
                _write_csv(out / f"{tag}_spatial_f{t}.csv", s[t])
                written.append(out / f"{tag}_spatial_f{t}.csv")
            if st.temporal is not None:
                tt = st.temporal.data[0]             # (N,T,T)
                emit(f"{tag}_temporal", tt)
                for n in range(tt.shape[0]):
                    _write_csv(out / f"{tag}_temporal_p{n}.csv", tt[n])
                    written.append(out / f"{tag}_temporal_p{n}.csv")
            emit(f"{tag}_relation", st.relation_norm.data[0],
                 st.relation_norm.data[0])
        if trace.ciau is not None:
            c = _subsample(trace.ciau.relation.data[0])
            emit(f"{tag}_channel", c, c)
    return sorted(written)
