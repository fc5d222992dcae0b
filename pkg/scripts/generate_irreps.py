"""Regenerate the bundled irreducible-representation files for small permutation groups.

A random Hermitian matrix averaged over the regular representation commutes
with every group element; its eigenspaces are generically irreducible
subrepresentations. One eigenspace per distinct character is kept.

    python scripts/generate_irreps.py S3 A5
"""

import argparse
import json
from pathlib import Path

import numpy as np

from group_rlvr.groups import group_from_name
from group_rlvr.spectral import load_irreps

DATA_DIR = Path(__file__).resolve().parents[1] / "src" / "group_rlvr" / "data"


def regular_matrices(table: np.ndarray) -> np.ndarray:
    d = table.shape[0]
    mats = np.zeros((d, d, d))
    for g in range(d):
        mats[g, table[g], np.arange(d)] = 1.0  # e_h -> e_{gh}
    return mats


def decompose(table: np.ndarray, seed: int = 0, tol: float = 1e-7) -> list[np.ndarray]:
    d = table.shape[0]
    rng = np.random.default_rng(seed)
    reg = regular_matrices(table)
    h = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    h = h + h.conj().T
    avg = np.einsum("gij,jk,glk->il", reg, h, reg)
    vals, vecs = np.linalg.eigh(avg)
    blocks, start = [], 0
    for i in range(1, d + 1):
        if i == d or abs(vals[i] - vals[start]) > tol * max(1.0, abs(vals[start])):
            blocks.append(vecs[:, start:i])
            start = i
    irreps, characters = [], []
    for basis in blocks:
        mats = np.einsum("ai,gab,bj->gij", basis.conj(), reg, basis)
        chi = np.trace(mats, axis1=1, axis2=2)
        if any(np.allclose(chi, c, atol=1e-6) for c in characters):
            continue
        characters.append(chi)
        irreps.append(mats)
    irreps.sort(key=lambda m: (m.shape[1], -np.trace(m, axis1=1, axis2=2).real.sum()))
    return irreps


def write(name: str, seed: int) -> Path:
    group = group_from_name(name)
    irreps = decompose(group.table, seed)
    assert sum(m.shape[1] ** 2 for m in irreps) == group.order, "decomposition incomplete"
    payload = {
        "group_name": group.name,
        "order": group.order,
        "elements": [list(p) for p in group.elements],
        "irreps": [
            {
                "dimension": int(m.shape[1]),
                "matrices": [[[float(z.real), float(z.imag)] for z in mat.ravel()] for mat in m],
            }
            for m in irreps
        ],
    }
    path = DATA_DIR / f"{group.name}.json"
    path.write_text(json.dumps(payload, separators=(",", ":")) + "\n")
    load_irreps(path)  # round-trip validation
    return path


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("groups", nargs="+")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    for name in args.groups:
        print(write(name, args.seed))


if __name__ == "__main__":
    main()
