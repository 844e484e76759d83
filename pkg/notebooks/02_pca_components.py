"""How much of the feature signal survives compression to k components.

Run:  python3 notebooks/02_pca_components.py

Uses 64-dim synthetic features. For each k the reconstruction error of the
PCA fit is compared with the energy in the discarded singular values, and the
per-pixel targets are checked for how well they still separate the objects
(cosine-similarity IoU on the target maps themselves, no training).
"""

import numpy as np

from semsplat import synth
from semsplat.query import QueryEmbedding, iou_2d
from semsplat.semfeat import build_feature_bundle, reconstruction_error
from semsplat.update import cosine_similarity

ds = synth.generate(synth.SyntheticSpec(feature_dim=64))
views = ds.train_views

for k in (1, 2, 4, 8, 16, 32, 64):
    bundle = build_feature_bundle([v.features for v in views], [v.masks for v in views], k)
    rows = bundle.fit_rows
    centred = rows - rows.mean(axis=0)
    tail = np.sum(np.linalg.svd(centred, compute_uv=False)[k:] ** 2)
    err = reconstruction_error(bundle.pca, rows)
    ious = []
    for v, (target, mask) in zip(views, bundle.target_maps()):
        for o, f in enumerate(ds.object_features):
            q = QueryEmbedding.from_raw(f, bundle.pca)
            cos = cosine_similarity(target.reshape(-1, k), q.compressed).reshape(mask.shape)
            heat = np.where(mask, (np.clip(cos, -1, 1) + 1) / 2, 0.0)
            ious.append(iou_2d(heat, 0.6, v.labels == o + 1))
    print(f"k={k:2d}  reconstruction {err:9.4f}  svd tail {tail:9.4f}  target IoU {np.mean(ious):.3f}")
