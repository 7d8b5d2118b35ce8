"""Feature engineering stubs: covariance, Pauli decomposition, PCA."""

import math


def covariance(inputs):
    pts = inputs["embedding"]
    n, dims = len(pts), len(pts[0])
    cov = [[round(sum(p[i] * p[j] for p in pts) / (n - 1), 6) for j in range(dims)] for i in range(dims)]
    return {"covariance": cov}


def pauli_terms(inputs):
    # a symmetric 2x2 matrix is a*I + b*Z + c*X
    (a, c), (_, d) = inputs["covariance"]
    return {"hamiltonian": {"I": round((a + d) / 2, 6), "Z": round((a - d) / 2, 6), "X": round(c, 6)}}


def select_components(inputs):
    (a, c), (_, d) = inputs["covariance"]
    top = max(inputs["eigenvalues"])
    # eigenvector of the largest eigenvalue
    vx, vy = (c, top - a) if abs(c) > 1e-12 else ((1.0, 0.0) if a >= d else (0.0, 1.0))
    norm = math.hypot(vx, vy) or 1.0
    return {"axis": [round(vx / norm, 6), round(vy / norm, 6)]}


def project(inputs):
    ax = inputs["axis"]
    feats = [[round(p[0] * ax[0] + p[1] * ax[1], 6), round(-p[0] * ax[1] + p[1] * ax[0], 6)] for p in inputs["embedding"]]
    return {"features": feats}
