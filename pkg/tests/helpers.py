import numpy as np

# central differences on float64 bottom out near 1e-10 absolute error, so the
# relative error uses a denominator floor; coordinates with tiny gradients are
# effectively checked to ~1e-9 absolute
FD_DENOM_FLOOR = 1e-4


def finite_difference_errors(model, params, batch, coords, h=1e-5):
    analytic = model.gradient(params, batch).values
    errors = []
    for c in coords:
        v = params.values.copy()
        v[c] += h
        up = model.forward_loss(params.with_values(v), batch)
        v[c] -= 2 * h
        down = model.forward_loss(params.with_values(v), batch)
        fd = (up - down) / (2 * h)
        errors.append(abs(fd - analytic[c]) / max(abs(fd), abs(analytic[c]), FD_DENOM_FLOOR))
    return np.array(errors)


def naive_loss(model, params, batch):
    """Per-sample, per-position loop over the captioner's definition."""
    W, b = model.unpack(params)
    total, count = 0.0, 0
    for x, toks in zip(batch.features, batch.tokens):
        for t, target in enumerate(toks):
            if target == 0:
                continue
            logits = [sum(W[t, v, f] * x[f] for f in range(len(x))) + b[t, v] for v in range(model.vocab_size)]
            mx = max(logits)
            lse = mx + np.log(sum(np.exp(z - mx) for z in logits))
            total += lse - logits[target]
            count += 1
    return total / count


def brute_ngram_list(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def brute_overlap(cand, ref, n):
    """Clipped overlap by greedy one-to-one matching of n-gram occurrences."""
    pool = brute_ngram_list(ref, n)
    hits = 0
    for g in brute_ngram_list(cand, n):
        if g in pool:
            pool.remove(g)
            hits += 1
    return hits


def brute_prf(hits, c, r):
    p = hits / c if c else 0.0
    rr = hits / r if r else 0.0
    return p, rr, (2 * p * rr / (p + rr) if p + rr else 0.0)


def brute_rouge_n(cand, ref, n):
    return brute_prf(brute_overlap(cand, ref, n), len(brute_ngram_list(cand, n)), len(brute_ngram_list(ref, n)))


def is_subsequence(sub, seq):
    it = iter(seq)
    return all(any(x == y for y in it) for x in sub)


def brute_lcs(a, b):
    from itertools import combinations

    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    for k in range(len(short), 0, -1):
        if any(is_subsequence(c, long_) for c in combinations(short, k)):
            return k
    return 0


def brute_rouge_l(cand, ref):
    return brute_prf(brute_lcs(cand, ref), len(cand), len(ref))


def formula_bleu(cands, refs, max_n=4):
    """Direct evaluation: pooled clipped precisions, add-one on zero higher orders, brevity penalty."""
    import math

    c = sum(len(x) for x in cands)
    r = sum(len(x) for x in refs)
    precisions = []
    for n in range(1, max_n + 1):
        hits = sum(brute_overlap(a, b, n) for a, b in zip(cands, refs))
        total = sum(len(brute_ngram_list(a, n)) for a in cands)
        if n == 1 and hits == 0:
            return 0.0
        precisions.append(hits / total if hits else 1 / (total + 1))
    bp = 1.0 if c >= r else math.exp(1 - r / c)
    return bp * math.prod(precisions) ** (1 / max_n)


# acceptance outcomes, printed as a table at the end of the session by conftest
ACCEPTANCE_RESULTS = {}


def report_criterion(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} ({detail})"
    ACCEPTANCE_RESULTS[number] = line
    print(line)
    return ok
