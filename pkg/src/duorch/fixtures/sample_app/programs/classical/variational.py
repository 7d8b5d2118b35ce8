"""Classical halves of the variational loops (VQE for eigenvalues, QAOA for MaxCut)."""

import math


def _energy(counts, hamiltonian):
    shots = sum(counts.values()) or 1
    z = sum(v * (1 if bits[-1] == "0" else -1) for bits, v in counts.items()) / shots
    return hamiltonian.get("I", 0.0) + hamiltonian.get("Z", 0.0) * z - abs(hamiltonian.get("X", 0.0)) * math.sqrt(max(0.0, 1 - z * z))


def prepare_ansatz(inputs):
    return {"theta": 0.1, "iteration": 0, "energy": None}


def optimize_parameters(inputs):
    energy = round(_energy(inputs["counts"], inputs["hamiltonian"]), 9)
    prev = inputs.get("energy")
    delta = 1.0e9 if prev is None else abs(energy - prev)
    return {"energy": energy, "energy_delta": round(delta, 9), "theta": round(inputs["theta"] * 0.7 + 0.05, 9),
            "iteration": inputs["iteration"] + 1}


def report_eigenvalue(inputs):
    h = inputs["hamiltonian"]
    radius = math.hypot(h.get("Z", 0.0), h.get("X", 0.0))
    exact = [round(h.get("I", 0.0) + radius, 6), round(h.get("I", 0.0) - radius, 6)]
    return {"eigenvalues": exact, "ground_energy": inputs.get("energy")}


def build_graph(inputs):
    pts = inputs["features"]
    return {"weights": [[round(math.dist(p, q), 6) for q in pts] for p in pts]}


def init_qaoa(inputs):
    return {"gamma": 0.5, "beta": 0.3, "iteration": 0, "best_cut": None, "best_value": -1.0}


def _cut_value(bits, weights):
    n = len(weights)
    return sum(weights[i][j] for i in range(n) for j in range(i + 1, n) if bits[i] != bits[j])


def optimize_qaoa(inputs):
    weights = inputs["weights"]
    best_cut, best_value = inputs.get("best_cut"), inputs.get("best_value", -1.0)
    for bits in sorted(inputs["counts"], key=lambda b: -inputs["counts"][b]):
        if len(set(bits)) == 1:
            continue
        value = round(_cut_value(bits, weights), 6)
        if value > best_value:
            best_cut, best_value = bits, value
    return {"gamma": round(inputs["gamma"] * 0.9, 9), "beta": round(inputs["beta"] * 1.1, 9),
            "iteration": inputs["iteration"] + 1, "best_cut": best_cut, "best_value": best_value}


def extract_cut(inputs):
    return {"cut": inputs["best_cut"], "cut_value": inputs["best_value"]}
