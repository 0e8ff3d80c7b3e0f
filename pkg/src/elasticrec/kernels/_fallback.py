"""Pure numpy implementations of the retrieval kernels."""
import numpy as np


def topk_rows(scores, k):
    """Row-wise top-k, descending; equal scores keep the lower column index first."""
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return order.astype(np.int64), np.take_along_axis(scores, order, axis=1)


def product_key_topk(queries, c_keys, c_prime_keys, k):
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    half = c_keys.shape[1]
    n_sub = c_keys.shape[0]
    q1, q2 = queries[:, :half], queries[:, half:]
    idx1, _ = topk_rows(q1 @ c_keys.T, k)
    idx2, _ = topk_rows(q2 @ c_prime_keys.T, k)

    # k*k candidate pairs; flat id = i * n_sub + j
    cand_i = np.repeat(idx1, k, axis=1)
    cand_j = np.tile(idx2, (1, k))
    cand_ids = cand_i * n_sub + cand_j
    keys = np.concatenate([c_keys[cand_i], c_prime_keys[cand_j]], axis=2)
    cand_scores = np.einsum("bcd,bd->bc", keys, queries)

    # sort by (score desc, id asc) so ties resolve to the lower expert id
    order = np.lexsort((cand_ids, -cand_scores), axis=1)[:, :k]
    return (np.take_along_axis(cand_ids, order, axis=1),
            np.take_along_axis(cand_scores, order, axis=1))
