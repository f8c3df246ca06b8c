"""Direct-formula metric oracles written with plain loops, independent of ``sen2lcz.metrics``."""


def oracle_metrics(cm, w=None):
    k = len(cm)
    n = 0.0
    diag = 0.0
    rows = [0.0] * k
    cols = [0.0] * k
    for i in range(k):
        for j in range(k):
            v = float(cm[i][j])
            n += v
            rows[i] += v
            cols[j] += v
            if i == j:
                diag += v
    po = diag / n
    pe = 0.0
    for i in range(k):
        pe += rows[i] * cols[i]
    pe /= n * n
    recalls = [float(cm[i][i]) / rows[i] for i in range(k) if rows[i] > 0]
    weighted = 0.0
    for i in range(k):
        for j in range(k):
            wij = (1.0 if i == j else 0.0) if w is None else float(w[i][j])
            weighted += wij * float(cm[i][j])

    def group(lo, hi):
        num = den = 0.0
        for i in range(lo, hi):
            for j in range(k):
                den += float(cm[i][j])
                if lo <= j < hi:
                    num += float(cm[i][j])
        return num / den

    return {
        "oa": po,
        "aa": sum(recalls) / len(recalls),
        "kappa": (po - pe) / (1.0 - pe),
        "wa": weighted / n,
        "oa_b": group(0, 10),
        "oa_nb": group(10, 17),
    }
