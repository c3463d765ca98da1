"""Independent reference implementations, written as plain loops."""
import math


def confusion_loop(pred, target, threshold):
    tp = fp = tn = fn = 0
    rows, cols = len(target), len(target[0])
    for i in range(rows):
        for j in range(cols):
            positive = float(pred[i][j]) >= threshold
            truth = int(target[i][j]) == 1
            if positive and truth:
                tp += 1
            elif positive:
                fp += 1
            elif truth:
                fn += 1
            else:
                tn += 1
    return tp, fp, tn, fn


def category_loop(cov, total=4096):
    # bounds are floor(20%), floor(50%), floor(80%) of the area, in integers
    if cov == 0:
        return "C0"
    if cov <= (20 * total) // 100:
        return "C1_20"
    if cov <= (50 * total) // 100:
        return "C21_50"
    if cov <= (80 * total) // 100:
        return "C51_80"
    return "C81_100"


def bucket_loop(targets, preds, threshold, fp_tolerance=40):
    """Returns {category: (count, detected)}."""
    out = {c: [0, 0] for c in ("C0", "C1_20", "C21_50", "C51_80", "C81_100")}
    for t, p in zip(targets, preds):
        tp, fp, _, fn = confusion_loop(p, t, threshold)
        cov = tp + fn
        cat = category_loop(cov, len(t) * len(t[0]))
        if cov == 0:
            ok = fp <= fp_tolerance
        else:
            # at least 10%: 10 * tp >= cov, in integers
            ok = 10 * tp >= cov
        out[cat][0] += 1
        out[cat][1] += int(ok)
    return {k: tuple(v) for k, v in out.items()}


def required_hits_loop(cov):
    k = 0
    while 10 * k < cov:
        k += 1
    return k


assert required_hits_loop(100) == 10 and required_hits_loop(101) == 11 == math.ceil(10.1)
