"""Compare the exact solver's zero set with the threshold rule's over a range of lambda.

    python scripts/kkt_zero_sets.py --instances 20
"""

import argparse

import numpy as np

from suvm.srn import PairStats, gaussian_form, matched_threshold, sample_gaussian_form, solve_convex_exact


def gmrf_stats(rng, n, samples=300):
    """Pair statistics of samples from a random spring chain with a few chords."""
    pairs = {(int(rng.integers(0, i)), i) for i in range(1, n)}
    for _ in range(n // 3):
        a, b = sorted(rng.choice(n, 2, replace=False).tolist())
        pairs.add((a, b))
    ei, ej = map(np.array, zip(*sorted(pairs)))
    free, mean, P, _ = gaussian_form(n, ei, ej, rng.uniform(0.5, 20.0, len(ei)), np.zeros(len(ei)))
    stats = PairStats(n)
    lo, hi = np.triu_indices(n, 1)
    for _ in range(samples):
        v = np.zeros(n)
        v[free] = sample_gaussian_form(mean, P, rng)
        d = v[hi] - v[lo]
        stats.push_samples(lo, hi, np.stack([d, d, 0.3 * d]))
    return stats


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--instances", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print("lam/median  zeroed  missed_matched_count  missed_min_kept  max(c-bound)")
    for frac in (0.1, 0.3, 1.0, 3.0):
        rng = np.random.default_rng(args.seed)
        zeroed = by_count = by_min = 0
        excess = -np.inf
        for _ in range(args.instances):
            stats = gmrf_stats(rng, int(rng.integers(3, 11)))
            lo, hi = stats.pairs()
            lam = frac * float(np.median(stats.variances()[:, lo, hi].sum(0)))
            sol = solve_convex_exact(stats, lam)
            excess = max(excess, float(np.max(sol.c - sol.bound)))
            zero = sol.c <= 1e-12
            if not zero.any():
                continue
            keep = int((~zero).sum())
            # matched sparsity: the rule keeps the same number of springs
            c_count = np.sort(sol.bound)[::-1][keep - 1]
            # smallest surviving exact stiffness as the target
            c_min = sol.c[~zero].min()
            by_count += int((zero & ~(sol.variance > matched_threshold(c_count, lam))).sum())
            by_min += int((zero & ~(sol.variance > matched_threshold(c_min, lam))).sum())
            zeroed += int(zero.sum())
        print(f"{frac:10.1f}  {zeroed:6d}  {by_count:20d}  {by_min:15d}  {excess:12.2e}")


if __name__ == "__main__":
    main()
