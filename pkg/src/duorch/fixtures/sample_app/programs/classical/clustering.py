"""Turn a MaxCut bipartition into k clusters."""


def assign_clusters(inputs):
    cut, feats, k = inputs["cut"], inputs["features"], int(inputs["k"])
    clusters = [[i for i, b in enumerate(cut) if b == side] for side in "01"]
    clusters = [c for c in clusters if c]
    while len(clusters) < k:
        clusters.sort(key=len)
        big = clusters.pop()
        if len(big) < 2:
            clusters.append(big)
            break
        big.sort(key=lambda i: feats[i][1])
        half = len(big) // 2
        clusters += [big[:half], big[half:]]
    clusters.sort(key=min)
    assignment = [0] * len(feats)
    for c, members in enumerate(clusters):
        for i in members:
            assignment[i] = c
    return {"cluster_assignment": assignment, "clusters": len(clusters)}
