#!/usr/bin/env python3
"""Design check for the corpus generator constants.

Simulates the same distributions (not the same RNG stream) and reports the
quantities the datagen tests pin down: oracle AUC ceiling, k-means silhouette
of the derived ID table in both modes, and label calibration. Thresholds in
tests/test_datagen.cpp were chosen to hold with margin here.
"""
import numpy as np
from sklearn.cluster import KMeans
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score, silhouette_score

rng = np.random.default_rng(0)

D = 16
N_USERS, N_ITEMS, N_TOPICS = 2000, 1000, 10
META_STD, TOPIC_STD, ITEM_STD = 1.2, 0.30, 0.35
SCALE_LOG_STD = 0.3
USER_STD = 0.5
CTX_STD = 0.15
NOISE = 0.25
N_INTER = 200000
D_ID = 32
TABLE_NOISE, POP_GAIN, COLD_STD = 0.18, 0.35, 0.1


def make_items(mode):
    meta = rng.normal(0, META_STD, (3, D))
    topics = meta[np.arange(N_TOPICS) % 3] + rng.normal(0, TOPIC_STD, (N_TOPICS, D))
    tid = rng.integers(0, N_TOPICS, N_ITEMS)
    scale = np.exp(SCALE_LOG_STD * rng.normal(size=(N_ITEMS, 1)))
    if mode == "clustered":
        lat = scale * (topics[tid] + rng.normal(0, ITEM_STD, (N_ITEMS, D)))
    else:
        lat = scale * rng.normal(0, 1.0, (N_ITEMS, D))
    return tid, lat


def run(mode):
    tid, item_lat = make_items(mode)
    user_lat = rng.normal(0, USER_STD, (N_USERS, D))
    w_ctx = rng.normal(0, CTX_STD, 6)

    n_warm = N_ITEMS - 200
    n_train = int(0.8 * N_INTER)
    pop = np.exp(0.8 * rng.normal(size=n_warm))
    pop /= pop.sum()

    uids = rng.integers(0, N_USERS, N_INTER)
    iids = np.empty(N_INTER, dtype=int)
    iids[:n_train] = rng.choice(n_warm, n_train, p=pop)
    cold_mask_eval = rng.random(N_INTER - n_train) < 0.5
    ev = np.where(cold_mask_eval, n_warm + rng.integers(0, 200, N_INTER - n_train),
                  rng.choice(n_warm, N_INTER - n_train, p=pop))
    iids[n_train:] = ev

    hour = rng.integers(0, 4, N_INTER)
    dev = rng.integers(0, 2, N_INTER)
    ctx = w_ctx[hour] + w_ctx[4 + dev]
    z = (user_lat[uids] * item_lat[iids]).sum(1) + ctx + NOISE * rng.normal(size=N_INTER)
    p = 1 / (1 + np.exp(-z))
    y = (rng.random(N_INTER) < p).astype(int)

    print(f"[{mode}] var(u.i) = {(user_lat[uids] * item_lat[iids]).sum(1).var():.2f}  "
          f"ctr = {y.mean():.3f}")

    # oracle: LR on [u.i, hour-onehot, device-onehot]
    X = np.column_stack([(user_lat[uids] * item_lat[iids]).sum(1),
                         np.eye(4)[hour], np.eye(2)[dev]])
    lr = LogisticRegression(max_iter=200).fit(X[:n_train], y[:n_train])
    s = lr.decision_function(X[n_train:])
    auc = roc_auc_score(y[n_train:], s)
    cold = iids[n_train:] >= n_warm
    auc_c = roc_auc_score(y[n_train:][cold], s[cold])
    auc_w = roc_auc_score(y[n_train:][~cold], s[~cold])
    print(f"[{mode}] oracle eval AUC = {auc:.3f} (warm {auc_w:.3f}, cold {auc_c:.3f})")

    # derived ID table on warm items, unit-norm, k=3 silhouette
    counts = np.bincount(iids[:n_train], minlength=N_ITEMS)[:n_warm]
    A = rng.normal(size=(D_ID, D)) / np.sqrt(D)
    mag = 1 + POP_GAIN * np.log1p(counts)
    e = mag[:, None] * (item_lat[:n_warm] @ A.T) + TABLE_NOISE * rng.normal(size=(n_warm, D_ID))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    km = KMeans(3, n_init=10, random_state=0).fit(e)
    sil = silhouette_score(e, km.labels_)
    print(f"[{mode}] id-table silhouette (k=3, unit-norm warm rows) = {sil:.3f}")

    # calibration: binned |mean(y) - mean(p)|
    bins = np.clip((p * 10).astype(int), 0, 9)
    errs = [abs(y[bins == b].mean() - p[bins == b].mean())
            for b in range(10) if (bins == b).sum() > 500]
    print(f"[{mode}] max binned calibration err = {max(errs):.4f}")
    return auc


run("clustered")
run("irregular")
