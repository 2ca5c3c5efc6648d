"""Scalar helpers shared verbatim by both kernel backends.

These are plain Python; the numba backend compiles them with ``njit`` so
that both paths draw the same random feature subsets.
"""

MINSTD_A = 48271
MINSTD_M = 2147483647

# response kinds understood by the tree grower
KIND_REGRESSION = 0
KIND_IV = 1

WEAK_COV_TOL = 1e-10


def minstd_next(state):
    return (state * MINSTD_A) % MINSTD_M


def seed_state(seed):
    s = seed % MINSTD_M
    if s == 0:
        s = 1
    return s


def draw_features(state, p, mtry, perm):
    """Partial Fisher-Yates: leaves ``mtry`` distinct features in perm[:mtry], ascending."""
    for i in range(p):
        perm[i] = i
    for i in range(mtry):
        # inlined minstd step so numba can compile this without globals
        state = (state * 48271) % 2147483647
        j = i + state % (p - i)
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp
    # insertion sort of the drawn prefix; avoids an allocation per node
    for i in range(1, mtry):
        v = perm[i]
        j = i - 1
        while j >= 0 and perm[j] > v:
            perm[j + 1] = perm[j]
            j -= 1
        perm[j + 1] = v
    return state
