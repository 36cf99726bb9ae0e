"""Deterministic desk-scale task generators, bundle I/O, and metrics.

Four generators build :class:`TaskBundle` objects whose train/val/test
splits are lists of :class:`~nsebm.learning.TrainingSample` over grounded
component models, ready for any of the learning algorithms:

* :func:`gen_mnist_add` - pair-sum supervision over value-coded digits.
  Digit d of C classes is coded d/(C-1) on a single target atom per slot, so
  a pair of k-digit numbers uses 2k digit atoms and one sum atom; a hard
  arithmetic rule ties digits to the (coded) sum.  Synthetic 2-D Gaussian
  clusters stand in for digit images.
* :func:`gen_sudoku4` - 4x4 Sudoku completion.  Every cell carries a deep
  one-hot prior; clue cells get class-informative features, the rest a blank
  cluster.  Latin/box structure is hard in the main (parameter-sharing)
  program and soft squared in the variable-sharing variant (a clamped output
  under hard mutual-exclusion rows would make the feasible set empty).
* :func:`gen_citation` - stochastic-block-model citation graph with noisy
  one-hot node features, neural topic prior, homophily propagation, and a
  per-node simplex; transductive node splits on one connected graph.
* :func:`gen_grid_path` - unit flow from corner to corner of a grid with
  per-edge costs and hard conservation; a planted cheap path is the unique
  optimum.  Edge costs enter through an always-active squared potential
  ``(Flow + Cost)/2`` whose 0->1 increment is affine in the cost, so integral
  solutions price exactly like a shortest path.

Bundles serialize to a directory (program, data maps, TSVs, manifest) via
:func:`write_bundle`; :func:`load_bundle` rebuilds a bundle from the recorded
manifest parameters (generators are seed-deterministic, so the rebuild is
exact) and verifies the stored program text.  :func:`evaluate` scores a
prediction map; :func:`predict_bundle` runs (optionally rounded) inference
over a split.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from . import grounding, lang, neural
from .energy import constraint_violation
from .lcqp import EPSILON, round_discrete, solve
from .learning import TrainingSample, group_samples, _group_g

__all__ = [
    "TaskBundle",
    "gen_mnist_add",
    "gen_sudoku4",
    "gen_citation",
    "gen_grid_path",
    "GENERATORS",
    "make_samples",
    "predict_bundle",
    "evaluate",
    "binary_accuracy",
    "make_metric",
    "write_bundle",
    "load_bundle",
]

FEATURE_SIGMA = 0.15  # class-cluster spread on the unit circle
CITE_FEATURE_NOISE = 0.45


@dataclass
class TaskBundle:
    """A generated task: program, splits of training samples, files, metric."""

    task: str
    program_src: str
    metric: str
    train: list
    val: list
    test: list
    manifest: dict
    files: dict = field(default_factory=dict)  # relpath -> text
    info: dict = field(default_factory=dict)  # split -> evaluation payload
    programs: dict = field(default_factory=dict)  # extra program variants

    def split(self, name):
        return {"train": self.train, "val": self.val, "test": self.test}[name]


# ---------------------------------------------------------------------------
# shared construction helpers


def _fmt(v):
    return "%.9g" % float(v)


def _tsv(rows):
    return "".join("\t".join(str(c) for c in row) + "\n" for row in rows)


def class_feature(rng, cls, classes, dim=2, sigma=FEATURE_SIGMA):
    """Synthetic stand-in for an image: Gaussian blob on the unit circle."""
    ang = 2.0 * np.pi * cls / classes
    mean = np.array([np.cos(ang), np.sin(ang)])
    return mean + sigma * rng.standard_normal(dim)


def blank_feature(rng, dim=2, sigma=FEATURE_SIGMA):
    return sigma * rng.standard_normal(dim)


def _binding_rows(sub):
    """(pred, group key, start) rows of a component in g-index order."""
    rows = []
    width = None
    for blk in sub.g_blocks:
        if width is None:
            width = blk.width
        elif width != blk.width:
            raise ValueError("mixed deep-block widths in one component")
        for key, s0 in zip(blk.group_keys, blk.group_start):
            rows.append((s0, blk.pred, key))
    rows.sort()
    return rows, (width or 1)


def make_samples(model, labels, nn_targets=None, tag=""):
    """Split a ground model into per-component training samples.

    ``labels``: {(pred, args): value} fixed during latent inference.
    ``nn_targets``: {(pred, group key): target vector} supervising the
    network rows that carry those groups.  Returns (samples, atom_index)
    where atom_index maps every target atom to (sample position, local y).
    """
    comps = grounding.connected_components(model)
    samples, atom_index = [], {}
    for ci, idxs in enumerate(comps):
        sub = grounding.extract_component(model, idxs)
        lab = {}
        for li, atom in enumerate(sub.y_atoms):
            atom_index[atom] = (ci, li)
            if atom in labels and li not in sub.dsvar_map:
                lab[li] = float(labels[atom])
        binding = nn_t = nn_m = None
        if sub.g_atoms and sub.features:
            rows, width = _binding_rows(sub)
            feats = np.stack([sub.features[pred][key] for _, pred, key in rows])
            starts = np.array([s0 for s0, _, _ in rows], dtype=int)
            binding = neural.NeuralBinding(feats, starts, width)
            nn_t = np.zeros((len(rows), width))
            nn_m = np.zeros(len(rows), dtype=bool)
            for r, (_, pred, key) in enumerate(rows):
                tgt = (nn_targets or {}).get((pred, key))
                if tgt is not None:
                    nn_t[r] = tgt
                    nn_m[r] = True
        samples.append(
            TrainingSample(sub, lab, binding, nn_t, nn_m, tag=f"{tag}{ci}")
        )
    return samples, atom_index


def _split_sizes(n):
    return n, max(1, n // 5), max(1, n // 2)


# ---------------------------------------------------------------------------
# MNIST-Add


def _mnist_slots(k):
    if k == 1:
        return [("ImgA", "DigA", 1), ("ImgB", "DigB", 1)]
    return [("ImgA1", "DigA1", 10), ("ImgA2", "DigA2", 1),
            ("ImgB1", "DigB1", 10), ("ImgB2", "DigB2", 1)]


def _mnist_program(k):
    slots = _mnist_slots(k)
    lines = ["// Pair-sum over value-coded digits; images are synthetic blobs."]
    for img, dig, _ in slots:
        lines.append(f"predicate {img}(P): deep")
    for _, dig, _ in slots:
        lines.append(f"predicate {dig}(P): target")
    lines.append("predicate SumVal(P): target")
    lines.append("")
    for img, dig, _ in slots:
        lines.append(f"1.0: {dig}(X) = {img}(X) ^2")
    total = sum(c for _, _, c in slots)
    terms = " + ".join(
        f"{dig}(X)" if c == 1 else f"{_fmt(c)} * {dig}(X)" for _, dig, c in slots
    )
    lines.append(f"{terms} - {_fmt(total)} * SumVal(X) = 0.0 .")
    return "\n".join(lines) + "\n"


def gen_mnist_add(k=1, classes=4, pairs=300, label_fraction=0.0, seed=0):
    """Adding pairs of k-digit numbers from synthetic digit features.

    Train pairs carry the coded sum as a label (distant supervision) plus
    direct digit labels on a ``label_fraction`` share of digit slots; val
    pairs keep their sum labels; test pairs have none.  Digit truth rides in
    ``bundle.info`` for evaluation.
    """
    if classes not in (2, 4, 10):
        raise ValueError("classes must be one of 2, 4, 10")
    if k not in (1, 2):
        raise ValueError("k must be 1 or 2")
    rng = np.random.default_rng(seed)
    slots = _mnist_slots(k)
    total_coef = sum(c for _, _, c in slots)
    code = lambda d: d / (classes - 1)
    sum_code = lambda s: s / (total_coef * (classes - 1))
    program_src = _mnist_program(k)
    program = lang.parse_program(program_src)

    bundle = TaskBundle(
        task="mnist-add",
        program_src=program_src,
        metric="accuracy",
        train=[], val=[], test=[],
        manifest={
            "task": "mnist-add", "seed": str(seed), "metric": "accuracy",
            "k": str(k), "classes": str(classes), "pairs": str(pairs),
            "label_fraction": _fmt(label_fraction),
        },
    )
    files = {"model.psl": program_src}
    n_train, n_val, n_test = _split_sizes(pairs)

    for split, count, sums_labeled in (
        ("train", n_train, True), ("val", n_val, True), ("test", n_test, False)
    ):
        digits = rng.integers(0, classes, size=(count, len(slots)))
        feats = np.stack([
            np.stack([class_feature(rng, digits[i, j], classes)
                      for j in range(len(slots))])
            for i in range(count)
        ])
        order = rng.permutation(count * len(slots))
        n_lab = int(round(label_fraction * count * len(slots)))
        labeled = np.zeros(count * len(slots), dtype=bool)
        labeled[order[:n_lab]] = True
        labeled = labeled.reshape(count, len(slots))
        if split == "test":
            labeled[:] = False
        sums = digits @ np.array([c for _, _, c in slots])
        assert all(sums[i] == sum(c * digits[i, j] for j, (_, _, c)
                                  in enumerate(slots)) for i in range(count))

        pair_ids = [f"q{i:04d}" for i in range(count)]
        tables = grounding.DataTables()
        tables.targets["SumVal"] = {(p,): None for p in pair_ids}
        labels, nn_targets = {}, {}
        info_rows = {}
        for j, (img, dig, _) in enumerate(slots):
            tables.targets[dig] = {(p,): None for p in pair_ids}
            tables.deep[img] = {(p,): 0.5 for p in pair_ids}
            tables.features[img] = {(p,): feats[i, j]
                                    for i, p in enumerate(pair_ids)}
        for i, p in enumerate(pair_ids):
            info_rows[p] = {
                "digits": [((slots[j][1], (p,)), int(digits[i, j]))
                           for j in range(len(slots))],
                "sum": (("SumVal", (p,)), int(sums[i])),
            }
            if sums_labeled:
                labels[("SumVal", (p,))] = sum_code(sums[i])
            for j, (img, dig, _) in enumerate(slots):
                if labeled[i, j]:
                    labels[(dig, (p,))] = code(digits[i, j])
                    nn_targets[(img, (p,))] = np.array([code(digits[i, j])])

        model = grounding.ground(program, tables)
        samples, atom_index = make_samples(model, labels, nn_targets,
                                           tag=f"{split}-")
        info = []
        for p in pair_ids:
            ci, _ = atom_index[("SumVal", (p,))]
            info.append({"pair": p, **info_rows[p]})
            info[-1]["sample"] = ci
        getattr(bundle, split).extend(samples)
        bundle.info[split] = {"pairs": info, "classes": classes,
                              "total_coef": total_coef,
                              "atom_index": atom_index}

        files[f"{split}.map"] = _mnist_map(split, slots)
        for j, (img, dig, _) in enumerate(slots):
            files[f"data/{split}_{img}_deep.tsv"] = _tsv(
                [(p, _fmt(0.5)) for p in pair_ids])
            files[f"data/{split}_{img}_features.tsv"] = _tsv(
                [(p, _fmt(feats[i, j][0]), _fmt(feats[i, j][1]))
                 for i, p in enumerate(pair_ids)])
            files[f"data/{split}_{dig}_targets.tsv"] = _tsv(
                [(p,) for p in pair_ids])
        files[f"data/{split}_SumVal_targets.tsv"] = _tsv(
            [(p,) for p in pair_ids])
        files[f"data/{split}_truth.tsv"] = _tsv(
            [(p, *(str(digits[i, j]) for j in range(len(slots))),
              str(sums[i])) for i, p in enumerate(pair_ids)])
        bundle.manifest[f"n_{split}"] = str(count)

    bundle.files = files
    return bundle


def _mnist_map(split, slots):
    lines = []
    for img, dig, _ in slots:
        lines.append(f"{img}: deep: 1: data/{split}_{img}_deep.tsv")
        lines.append(f"{img}: features: data/{split}_{img}_features.tsv")
        lines.append(f"{dig}: target: data/{split}_{dig}_targets.tsv")
    lines.append(f"SumVal: target: data/{split}_SumVal_targets.tsv")
    return "\n".join(lines) + "\n"


def mnist_decode(bundle, split, predictions):
    """Digit accuracy and sum MAE (digit units) from a prediction map."""
    info = bundle.info[split]
    classes, total = info["classes"], info["total_coef"]
    hits = n = 0
    errs = []
    for row in info["pairs"]:
        for atom, true_d in row["digits"]:
            v = predictions[atom]
            hits += int(np.clip(round(v * (classes - 1)), 0, classes - 1)
                        == true_d)
            n += 1
        s_atom, true_s = row["sum"]
        errs.append(abs(predictions[s_atom] * total * (classes - 1) - true_s))
    return hits / max(n, 1), float(np.mean(errs))


# ---------------------------------------------------------------------------
# 4x4 Sudoku


_SUDOKU_UNITS = None


def _sudoku_units():
    global _SUDOKU_UNITS
    if _SUDOKU_UNITS is None:
        rows = [[(r, c) for c in range(4)] for r in range(4)]
        cols = [[(r, c) for r in range(4)] for c in range(4)]
        boxes = [[(r + dr, c + dc) for dr in range(2) for dc in range(2)]
                 for r in (0, 2) for c in (0, 2)]
        _SUDOKU_UNITS = rows + cols + boxes
    return _SUDOKU_UNITS


def _sudoku_fill(rng):
    """A uniformly shuffled complete 4x4 board via backtracking."""
    grid = np.full((4, 4), -1, dtype=int)

    def ok(r, c, d):
        if d in grid[r, :] or d in grid[:, c]:
            return False
        br, bc = 2 * (r // 2), 2 * (c // 2)
        return d not in grid[br:br + 2, bc:bc + 2]

    def rec(pos):
        if pos == 16:
            return True
        r, c = divmod(pos, 4)
        for d in rng.permutation(4):
            if ok(r, c, int(d)):
                grid[r, c] = int(d)
                if rec(pos + 1):
                    return True
                grid[r, c] = -1
        return False

    rec(0)
    return grid


def _sudoku_solvable(clues):
    """Exact search: does any completion of the clue dict exist?"""
    grid = np.full((4, 4), -1, dtype=int)
    for (r, c), d in clues.items():
        grid[r, c] = d

    def ok(r, c, d):
        if d in grid[r, :] or d in grid[:, c]:
            return False
        br, bc = 2 * (r // 2), 2 * (c // 2)
        return d not in grid[br:br + 2, bc:bc + 2]

    def rec(pos):
        if pos == 16:
            return True
        r, c = divmod(pos, 4)
        if grid[r, c] >= 0:
            return rec(pos + 1)
        for d in range(4):
            if ok(r, c, d):
                grid[r, c] = d
                if rec(pos + 1):
                    return True
                grid[r, c] = -1
        return False

    return rec(0)


def _sudoku_program(hard=True):
    rs = ["r0", "r1", "r2", "r3"]
    cs = ["c0", "c1", "c2", "c3"]
    ds = ["d0", "d1", "d2", "d3"]
    head = [
        "// 4x4 Sudoku completion with a neural per-cell prior.",
        f"domain R = {', '.join(rs)}",
        f"domain C = {', '.join(cs)}",
        f"domain D = {', '.join(ds)}",
        "predicate ClueImg(P, R, C, D): deep",
        "predicate Cell(P, R, C, D): target",
        "",
        "1.0: Cell(P, R, C, D) = ClueImg(P, R, C, D) ^2",
    ]
    units = []
    units.append(" + ".join(f"Cell(P, R, C, {d})" for d in ds) + " = 1.0")
    units.append(" + ".join(f"Cell(P, R, {c}, D)" for c in cs) + " = 1.0")
    units.append(" + ".join(f"Cell(P, {r}, C, D)" for r in rs) + " = 1.0")
    for br in (0, 2):
        for bc in (0, 2):
            cells = [f"Cell(P, {rs[br + dr]}, {cs[bc + dc]}, D)"
                     for dr in range(2) for dc in range(2)]
            units.append(" + ".join(cells) + " = 1.0")
    body = [u + " ." if hard else "1.0: " + u + " ^2" for u in units]
    return "\n".join(head + body) + "\n"


def gen_sudoku4(puzzles=50, clues=6, seed=0, max_retries=50):
    """4x4 Sudoku bundles with per-cell deep priors.

    Every cell is "an image": clue cells draw from their digit's feature
    cluster, the rest from a blank cluster, so the network can only be
    confident on clues and the hard rows must complete the board.  Clue
    values are also fixed as labels during inference.
    """
    if not (0 <= clues <= 16):
        raise ValueError("clues must be in [0, 16]")
    rng = np.random.default_rng(seed)
    program_src = _sudoku_program(hard=True)
    program = lang.parse_program(program_src)
    rs, cs, ds = (["r0", "r1", "r2", "r3"], ["c0", "c1", "c2", "c3"],
                  ["d0", "d1", "d2", "d3"])

    bundle = TaskBundle(
        task="sudoku4",
        program_src=program_src,
        metric="accuracy",
        train=[], val=[], test=[],
        manifest={
            "task": "sudoku4", "seed": str(seed), "metric": "accuracy",
            "puzzles": str(puzzles), "clues": str(clues),
        },
        programs={"model_dsvar.psl": _sudoku_program(hard=False)},
    )
    files = {"model.psl": program_src,
             "model_dsvar.psl": bundle.programs["model_dsvar.psl"]}
    n_train, n_val, n_test = _split_sizes(puzzles)

    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        pids = [f"b{i:04d}" for i in range(count)]
        tables = grounding.DataTables()
        tables.deep_widths["ClueImg"] = 4
        tables.targets["Cell"] = {}
        tables.deep["ClueImg"] = {}
        tables.features["ClueImg"] = {}
        labels, nn_targets = {}, {}
        info = []
        for i, p in enumerate(pids):
            for attempt in range(max_retries):
                grid = _sudoku_fill(rng)
                cells = [(r, c) for r in range(4) for c in range(4)]
                picks = rng.choice(16, size=clues, replace=False)
                clue_map = {cells[j]: int(grid[cells[j]]) for j in picks}
                if _sudoku_solvable(clue_map):
                    break
            else:  # pragma: no cover - construction guarantees solvability
                raise RuntimeError("could not generate a solvable puzzle")
            info.append({"puzzle": p, "solution": grid.tolist(),
                         "clues": sorted((r, c, d)
                                         for (r, c), d in clue_map.items())})
            for r in range(4):
                for c in range(4):
                    key = (p, rs[r], cs[c])
                    is_clue = (r, c) in clue_map
                    feat = (class_feature(rng, grid[r, c], 4) if is_clue
                            else blank_feature(rng))
                    tables.features["ClueImg"][key] = feat
                    for d in range(4):
                        tables.targets["Cell"][key + (ds[d],)] = None
                        tables.deep["ClueImg"][key + (ds[d],)] = 0.25
                    if is_clue:
                        onehot = np.zeros(4)
                        onehot[grid[r, c]] = 1.0
                        nn_targets[("ClueImg", key)] = onehot
                    if is_clue or split == "train":
                        for d in range(4):
                            labels[("Cell", key + (ds[d],))] = float(
                                d == grid[r, c])
        model = grounding.ground(program, tables)
        samples, atom_index = make_samples(model, labels, nn_targets,
                                           tag=f"{split}-")
        for k, row in enumerate(info):
            row["sample"] = atom_index[("Cell", (row["puzzle"], "r0", "c0",
                                                 "d0"))][0]
        getattr(bundle, split).extend(samples)
        bundle.info[split] = {"puzzles": info, "atom_index": atom_index}

        files[f"{split}.map"] = (
            f"ClueImg: deep: 4: data/{split}_ClueImg_deep.tsv\n"
            f"ClueImg: features: data/{split}_ClueImg_features.tsv\n"
            f"Cell: target: data/{split}_Cell_targets.tsv\n"
        )
        files[f"data/{split}_ClueImg_deep.tsv"] = _tsv(
            sorted((args + (_fmt(v),))
                   for args, v in tables.deep["ClueImg"].items()))
        files[f"data/{split}_ClueImg_features.tsv"] = _tsv(
            sorted((key + tuple(_fmt(x) for x in vec))
                   for key, vec in tables.features["ClueImg"].items()))
        files[f"data/{split}_Cell_targets.tsv"] = _tsv(
            sorted(tables.targets["Cell"]))
        files[f"data/{split}_solutions.tsv"] = _tsv(
            [(row["puzzle"],
              *(str(d) for r in row["solution"] for d in r)) for row in info])
        bundle.manifest[f"n_{split}"] = str(count)

    bundle.files = files
    return bundle


def sudoku_decode(bundle, split, predictions):
    """Cell accuracy by per-cell argmax (ties to the lowest digit)."""
    info = bundle.info[split]
    ds = ["d0", "d1", "d2", "d3"]
    hits = n = 0
    for row in info["puzzles"]:
        p = row["puzzle"]
        for r in range(4):
            for c in range(4):
                vals = [predictions[("Cell", (p, f"r{r}", f"c{c}", d))]
                        for d in ds]
                pred = int(np.argmax(vals))  # argmax keeps the first maximum
                hits += int(pred == row["solution"][r][c])
                n += 1
    return hits / max(n, 1)


# ---------------------------------------------------------------------------
# citation graph


def _citation_program(topics):
    ts = [f"t{i}" for i in range(topics)]
    simplex = " + ".join(f"Topic(N, {t})" for t in ts)
    return "\n".join([
        "// Transductive topic classification on a citation graph.",
        f"domain T = {', '.join(ts)}",
        "predicate NnTopic(N, T): deep",
        "predicate Topic(N, T): target",
        "predicate Cite(N, N): observed",
        "",
        "1.0: Topic(N, T) = NnTopic(N, T) ^2",
        "1.0: Cite(A, B) & Topic(A, T) -> Topic(B, T)",
        "0.05: Topic(N, T) <= 0.0",
        f"{simplex} = 1.0 .",
    ]) + "\n"


def gen_citation(nodes=24, edges=60, topics=4, homophily=0.8,
                 label_fraction=0.5, seed=0):
    """One connected SBM graph; transductive node splits share the model.

    The train sample fixes train-node labels; the val/test samples fix the
    labels of every *other* split (standard transductive evaluation) and are
    scored on their own nodes.
    """
    if not (0.0 <= homophily <= 1.0):
        raise ValueError("homophily must be in [0, 1]")
    if topics < 2 or nodes < topics:
        raise ValueError("need at least 2 topics and nodes >= topics")
    rng = np.random.default_rng(seed)
    names = [f"n{i:03d}" for i in range(nodes)]
    classes = np.array([i % topics for i in range(nodes)])
    rng.shuffle(classes)

    edge_set = set()

    def add_edge(a, b):
        if a != b:
            edge_set.add((min(a, b), max(a, b)))

    order = rng.permutation(nodes)
    for k in range(1, nodes):  # random spanning tree keeps one component
        v = order[k]
        prev = order[:k]
        same = prev[classes[prev] == classes[v]]
        pool = same if (len(same) and rng.random() < homophily) else prev
        add_edge(int(v), int(rng.choice(pool)))
    for _ in range(20 * edges):
        if len(edge_set) >= edges:
            break
        if rng.random() < homophily:
            t = rng.integers(topics)
            members = np.nonzero(classes == t)[0]
            if len(members) < 2:
                continue
            a, b = rng.choice(members, size=2, replace=False)
        else:
            a, b = rng.choice(nodes, size=2, replace=False)
        add_edge(int(a), int(b))

    feats = np.zeros((nodes, topics))
    for i in range(nodes):
        feats[i, classes[i]] = 1.0
    feats += CITE_FEATURE_NOISE * rng.standard_normal((nodes, topics))

    perm = rng.permutation(nodes)
    n_tr = int(round(label_fraction * nodes))
    rest = nodes - n_tr
    tr_nodes = sorted(perm[:n_tr].tolist())
    va_nodes = sorted(perm[n_tr:n_tr + max(1, rest // 2)].tolist())
    te_nodes = sorted(perm[n_tr + max(1, rest // 2):].tolist())

    program_src = _citation_program(topics)
    program = lang.parse_program(program_src)
    ts = [f"t{i}" for i in range(topics)]

    tables = grounding.DataTables()
    tables.deep_widths["NnTopic"] = topics
    tables.targets["Topic"] = {(n, t): None for n in names for t in ts}
    tables.deep["NnTopic"] = {(n, t): 1.0 / topics for n in names for t in ts}
    tables.features["NnTopic"] = {(n,): feats[i] for i, n in enumerate(names)}
    tables.observed["Cite"] = {}
    for a, b in sorted(edge_set):
        tables.observed["Cite"][(names[a], names[b])] = 1.0
        tables.observed["Cite"][(names[b], names[a])] = 1.0
    model = grounding.ground(program, tables)

    def onehot(c):
        v = np.zeros(topics)
        v[c] = 1.0
        return v

    def label_map(node_ids):
        out = {}
        for i in node_ids:
            for d, t in enumerate(ts):
                out[("Topic", (names[i], t))] = float(d == classes[i])
        return out

    bundle = TaskBundle(
        task="citation",
        program_src=program_src,
        metric="accuracy",
        train=[], val=[], test=[],
        manifest={
            "task": "citation", "seed": str(seed), "metric": "accuracy",
            "nodes": str(nodes), "edges": str(edges), "topics": str(topics),
            "homophily": _fmt(homophily),
            "label_fraction": _fmt(label_fraction),
            "n_edges_actual": str(len(edge_set)),
        },
    )
    context = {"train": tr_nodes, "val": tr_nodes,
               "test": tr_nodes + va_nodes}
    for split, eval_nodes in (("train", tr_nodes), ("val", va_nodes),
                              ("test", te_nodes)):
        labels = label_map(context[split])
        nn_nodes = {"train": tr_nodes, "val": eval_nodes, "test": []}[split]
        nn_targets = {("NnTopic", (names[i],)): onehot(classes[i])
                      for i in nn_nodes}
        samples, atom_index = make_samples(model, labels, nn_targets,
                                           tag=f"{split}-")
        getattr(bundle, split).extend(samples)
        bundle.info[split] = {
            "nodes": [names[i] for i in eval_nodes],
            "classes": {names[i]: int(classes[i]) for i in eval_nodes},
            "topics": topics,
            "atom_index": atom_index,
        }
        bundle.manifest[f"n_{split}"] = str(len(eval_nodes))

    files = {"model.psl": program_src}
    files["data/NnTopic_deep.tsv"] = _tsv(
        sorted((n, t, _fmt(1.0 / topics)) for n in names for t in ts))
    files["data/NnTopic_features.tsv"] = _tsv(
        [(n, *(_fmt(x) for x in feats[i])) for i, n in enumerate(names)])
    files["data/Topic_targets.tsv"] = _tsv(
        sorted((n, t) for n in names for t in ts))
    files["data/Cite_observed.tsv"] = _tsv(
        sorted((a, b, _fmt(1.0)) for (a, b) in tables.observed["Cite"]))
    files["data/node_classes.tsv"] = _tsv(
        [(n, str(classes[i])) for i, n in enumerate(names)])
    for split in ("train", "val", "test"):
        files[f"{split}.map"] = (
            "NnTopic: deep: %d: data/NnTopic_deep.tsv\n"
            "NnTopic: features: data/NnTopic_features.tsv\n"
            "Topic: target: data/Topic_targets.tsv\n"
            "Cite: observed: data/Cite_observed.tsv\n" % topics
        )
    bundle.files = files
    return bundle


def citation_decode(bundle, split, predictions):
    info = bundle.info[split]
    ts = [f"t{i}" for i in range(info["topics"])]
    hits = 0
    for n in info["nodes"]:
        vals = [predictions[("Topic", (n, t))] for t in ts]
        hits += int(int(np.argmax(vals)) == info["classes"][n])
    return hits / max(len(info["nodes"]), 1)


# ---------------------------------------------------------------------------
# grid pathfinding


def _grid_edges(size):
    """Directed lattice edges as (name, head node, tail node) triples."""
    def node(r, c):
        return f"v{r}{c}"

    out = []
    for r in range(size):
        for c in range(size):
            if c + 1 < size:
                out.append((f"{node(r, c)}_{node(r, c + 1)}", (r, c), (r, c + 1)))
                out.append((f"{node(r, c + 1)}_{node(r, c)}", (r, c + 1), (r, c)))
            if r + 1 < size:
                out.append((f"{node(r, c)}_{node(r + 1, c)}", (r, c), (r + 1, c)))
                out.append((f"{node(r + 1, c)}_{node(r, c)}", (r + 1, c), (r, c)))
    return out


def _grid_program(size, prior_weight=0.05):
    edges = _grid_edges(size)
    lines = [
        "// Unit corner-to-corner flow with hard conservation.",
        "predicate OnPath(I, E): deep",
        "predicate Flow(I, E): target",
        "predicate Cost(I, E): observed",
        "",
        "1.0: 0.5 * Flow(I, E) + 0.5 * Cost(I, E) <= 0.0 ^2",
        f"{_fmt(prior_weight)}: Flow(I, E) = OnPath(I, E) ^2",
    ]
    by_head, by_tail = {}, {}
    for name, u, v in edges:
        by_head.setdefault(u, []).append(name)
        by_tail.setdefault(v, []).append(name)
    src, dst = (0, 0), (size - 1, size - 1)
    for r in range(size):
        for c in range(size):
            v = (r, c)
            terms = [f"Flow(I, {e})" for e in by_head[v]]
            terms += [f"- Flow(I, {e})" for e in by_tail[v]]
            rhs = 1.0 if v == src else (-1.0 if v == dst else 0.0)
            expr = " ".join(t if i == 0 else
                            (t if t.startswith("-") else "+ " + t)
                            for i, t in enumerate(terms))
            lines.append(f"{expr} = {_fmt(rhs)} .")
    return "\n".join(lines) + "\n"


def _dijkstra_grid(size, weight):
    """Node predecessor map for corner-to-corner search; tie-stable."""
    src, dst = (0, 0), (size - 1, size - 1)
    dist = {src: 0.0}
    prev = {}
    heap = [(0.0, src)]
    seen = set()
    while heap:
        d, u = heapq.heappop(heap)
        if u in seen:
            continue
        seen.add(u)
        if u == dst:
            break
        r, c = u
        for v in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if not (0 <= v[0] < size and 0 <= v[1] < size):
                continue
            nd = d + weight(u, v)
            if nd < dist.get(v, np.inf) - 1e-15:
                dist[v] = nd
                prev[v] = u
                heapq.heappush(heap, (nd, v))
    path = [dst]
    while path[-1] != src:
        path.append(prev[path[-1]])
    return list(reversed(path)), dist[dst]


def gen_grid_path(instances=50, size=6, seed=0, prior_weight=0.05,
                  max_retries=50):
    """Corner-to-corner unit flows with planted cheap paths.

    Per instance, all edges draw costs from U(0.5, 0.95) and a random
    monotone staircase path is re-priced in U(0.08, 0.2); the generator
    verifies with its own graph search that the planted path is the unique
    integral optimum of the energy's per-edge 0->1 price and regenerates
    otherwise.  Edge features are (cost, row step, column step).
    """
    if size < 2:
        raise ValueError("size must be >= 2")
    rng = np.random.default_rng(seed)
    edges = _grid_edges(size)
    program_src = _grid_program(size, prior_weight)
    program = lang.parse_program(program_src)
    name_of = {(u, v): name for name, u, v in edges}

    bundle = TaskBundle(
        task="grid-path",
        program_src=program_src,
        metric="consistency",
        train=[], val=[], test=[],
        manifest={
            "task": "grid-path", "seed": str(seed), "metric": "consistency",
            "instances": str(instances), "size": str(size),
            "prior_weight": _fmt(prior_weight),
        },
    )
    n_train, n_val, n_test = _split_sizes(instances)
    files = {"model.psl": program_src}

    # integral 0->1 price of one directed edge at neutral prior output 0.5:
    # squared cost potential (w+eps)*((f+c)/2)^2 plus prior and box terms
    def edge_price(cost):
        w_c = 1.0 + EPSILON
        w_p = prior_weight + EPSILON
        return (w_c * 0.25 * (1.0 + 2.0 * cost)
                + w_p * (1.0 - 2.0 * 0.5) + EPSILON)

    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        iids = [f"g{i:04d}" for i in range(count)]
        tables = grounding.DataTables()
        tables.targets["Flow"] = {}
        tables.observed["Cost"] = {}
        tables.deep["OnPath"] = {}
        tables.features["OnPath"] = {}
        labels, nn_targets = {}, {}
        info = []
        for i, iid in enumerate(iids):
            for attempt in range(max_retries):
                cost_u = {}
                for name, u, v in edges:
                    key = (min(u, v), max(u, v))
                    if key not in cost_u:
                        cost_u[key] = rng.uniform(0.5, 0.95)
                moves = ["R"] * (size - 1) + ["D"] * (size - 1)
                rng.shuffle(moves)
                pos = (0, 0)
                planted = []
                for m in moves:
                    nxt = (pos[0], pos[1] + 1) if m == "R" else (pos[0] + 1,
                                                                 pos[1])
                    planted.append((pos, nxt))
                    key = (min(pos, nxt), max(pos, nxt))
                    cost_u[key] = rng.uniform(0.08, 0.2)
                    pos = nxt

                def w_fn(u, v):
                    return edge_price(cost_u[(min(u, v), max(u, v))])

                path, opt = _dijkstra_grid(size, w_fn)
                found = list(zip(path[:-1], path[1:]))
                if found == planted:
                    second = opt + 1.0  # cheapest alternative seen
                    alt_ok = True
                    for (u, v) in planted:  # unique optimum check
                        key = (min(u, v), max(u, v))
                        old = cost_u[key]
                        cost_u[key] = 10.0
                        try:
                            _, alt = _dijkstra_grid(size, w_fn)
                        except KeyError:
                            alt = np.inf
                        cost_u[key] = old
                        second = min(second, alt)
                    alt_ok = second > opt + 1e-6
                    if alt_ok:
                        break
            else:  # pragma: no cover
                raise RuntimeError("could not plant a unique cheapest path")
            on_path = {name_of[e] for e in planted}
            info.append({
                "instance": iid,
                "path_edges": sorted(on_path),
                "opt_price": float(opt),
            })
            for name, u, v in edges:
                c = cost_u[(min(u, v), max(u, v))]
                tables.targets["Flow"][(iid, name)] = None
                tables.observed["Cost"][(iid, name)] = c
                tables.deep["OnPath"][(iid, name)] = 0.5
                dr, dc = v[0] - u[0], v[1] - u[1]
                tables.features["OnPath"][(iid, name)] = np.array(
                    [c, float(dr), float(dc)])
                truth = float(name in on_path)
                if split == "train":
                    labels[("Flow", (iid, name))] = truth
                if split != "test":
                    nn_targets[("OnPath", (iid, name))] = np.array([truth])

        model = grounding.ground(program, tables)
        samples, atom_index = make_samples(model, labels, nn_targets,
                                           tag=f"{split}-")
        for k, row in enumerate(info):
            row["sample"] = atom_index[("Flow", (row["instance"],
                                                 edges[0][0]))][0]
        getattr(bundle, split).extend(samples)
        bundle.info[split] = {"instances": info, "atom_index": atom_index,
                              "edges": [e[0] for e in edges]}

        files[f"{split}.map"] = (
            f"OnPath: deep: 1: data/{split}_OnPath_deep.tsv\n"
            f"OnPath: features: data/{split}_OnPath_features.tsv\n"
            f"Flow: target: data/{split}_Flow_targets.tsv\n"
            f"Cost: observed: data/{split}_Cost_observed.tsv\n"
        )
        files[f"data/{split}_OnPath_deep.tsv"] = _tsv(
            sorted((i, e, _fmt(0.5)) for (i, e) in tables.deep["OnPath"]))
        files[f"data/{split}_OnPath_features.tsv"] = _tsv(
            sorted((i, e, *(_fmt(x) for x in vec))
                   for (i, e), vec in tables.features["OnPath"].items()))
        files[f"data/{split}_Flow_targets.tsv"] = _tsv(
            sorted(tables.targets["Flow"]))
        files[f"data/{split}_Cost_observed.tsv"] = _tsv(
            sorted((i, e, _fmt(v))
                   for (i, e), v in tables.observed["Cost"].items()))
        files[f"data/{split}_paths.tsv"] = _tsv(
            [(row["instance"], *row["path_edges"]) for row in info])
        bundle.manifest[f"n_{split}"] = str(count)

    bundle.files = files
    return bundle


def grid_decode(bundle, split, predictions):
    """Fraction of instances whose predicted edge set is the planted path."""
    info = bundle.info[split]
    hits = 0
    for row in info["instances"]:
        iid = row["instance"]
        chosen = sorted(e for e in info["edges"]
                        if predictions[("Flow", (iid, e))] > 0.5)
        hits += int(chosen == row["path_edges"])
    return hits / max(len(info["instances"]), 1)


# ---------------------------------------------------------------------------
# prediction + evaluation


def predict_bundle(bundle, split, mlp, w, rounded=None, epsilon=EPSILON,
                   groups=None):
    """Inference over a split: labels fixed, latents solved, optional rounding.

    Returns {(pred, args): value}.  ``rounded`` defaults to True for tasks
    whose metrics need discrete states (sudoku4, grid-path).
    """
    if rounded is None:
        rounded = bundle.task in ("sudoku4", "grid-path")
    samples = bundle.split(split)
    groups = groups if groups is not None else group_samples(samples, epsilon)
    predictions = {}
    for grp in groups:
        g, _ = _group_g(grp, mlp)
        lq = grp.lcqp_latent
        t = grp.t if grp.t.shape[1] else None
        res = solve(lq, w, x=grp.x, t=t, g=g if grp.n_g else None)
        y_full = res.y_full.copy()
        if rounded:
            y01 = round_discrete(grp.samples[0].model, w=w, epsilon=epsilon,
                                 y0=res.y, x=grp.x, g=g if grp.n_g else None,
                                 t=t, lcqp=lq)
            y_full[:, lq.free_y] = y01
        for b, s in enumerate(grp.samples):
            for li, atom in enumerate(s.model.y_atoms):
                predictions[atom] = float(y_full[b, li])
    return predictions


def binary_accuracy(predictions, truth):
    """Thresholded accuracy for binary targets; 0.5 ties resolve to 0."""
    hits = 0
    for atom, t in truth.items():
        hits += int((1 if predictions[atom] > 0.5 else 0) == int(round(t)))
    return hits / max(len(truth), 1)


def evaluate(bundle, predictions, split="test", feas_tol=1e-6):
    """Metric report for a prediction map over one split.

    Consistency is the fraction of instances whose hard constraints all hold
    at the predicted values.  Accuracy decodes per task (digit codes for
    mnist-add, per-group argmax with ties to the first class for sudoku4 and
    citation, exact path match for grid-path).  Raises on missing rows.
    """
    samples = bundle.split(split)
    consistent = 0
    for s in samples:
        try:
            y = np.array([predictions[a] for a in s.model.y_atoms])
        except KeyError as exc:
            raise ValueError(f"missing prediction for atom {exc}") from exc
        consistent += int(constraint_violation(s.model, y) <= feas_tol)
    report = {"consistency": consistent / max(len(samples), 1)}
    if bundle.task == "mnist-add":
        acc, mae = mnist_decode(bundle, split, predictions)
        report["accuracy"] = acc
        report["mae"] = mae
    elif bundle.task == "sudoku4":
        report["accuracy"] = sudoku_decode(bundle, split, predictions)
    elif bundle.task == "citation":
        report["accuracy"] = citation_decode(bundle, split, predictions)
    elif bundle.task == "grid-path":
        report["accuracy"] = grid_decode(bundle, split, predictions)
    return report


def make_metric(bundle, split="val", rounded=None, epsilon=EPSILON):
    """Callable (mlp, w) -> bundle metric on a split; groups built once."""
    groups = group_samples(bundle.split(split), epsilon)

    def metric(mlp, w):
        preds = predict_bundle(bundle, split, mlp, w, rounded=rounded,
                               epsilon=epsilon, groups=groups)
        return evaluate(bundle, preds, split)[bundle.metric]

    return metric


# ---------------------------------------------------------------------------
# bundle directory I/O


GENERATORS = {
    "mnist-add": (gen_mnist_add,
                  {"k": int, "classes": int, "pairs": int,
                   "label_fraction": float, "seed": int}),
    "sudoku4": (gen_sudoku4, {"puzzles": int, "clues": int, "seed": int}),
    "citation": (gen_citation,
                 {"nodes": int, "edges": int, "topics": int,
                  "homophily": float, "label_fraction": float, "seed": int}),
    "grid-path": (gen_grid_path,
                  {"instances": int, "size": int, "seed": int}),
}


def write_bundle(bundle, outdir):
    """Write program, maps, data TSVs, and manifest under ``outdir``."""
    import os

    os.makedirs(os.path.join(outdir, "data"), exist_ok=True)
    for rel, text in sorted(bundle.files.items()):
        path = os.path.join(outdir, rel)
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    rows = [(k, bundle.manifest[k]) for k in sorted(bundle.manifest)]
    with open(os.path.join(outdir, "manifest.tsv"), "w", encoding="utf-8") as fh:
        fh.write(_tsv(rows))


def load_bundle(path):
    """Rebuild a bundle from its manifest (generators are deterministic).

    The stored program text is checked against the regenerated one so silent
    edits of a bundle directory fail loudly instead of desynchronizing the
    samples from the files.
    """
    import os

    manifest = {}
    with open(os.path.join(path, "manifest.tsv"), "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                k, v = line.rstrip("\n").split("\t", 1)
                manifest[k] = v
    task = manifest.get("task")
    if task not in GENERATORS:
        raise ValueError(f"unknown task {task!r} in manifest")
    fn, schema = GENERATORS[task]
    kwargs = {k: typ(manifest[k]) for k, typ in schema.items() if k in manifest}
    bundle = fn(**kwargs)
    model_path = os.path.join(path, "model.psl")
    if os.path.exists(model_path):
        with open(model_path, "r", encoding="utf-8") as fh:
            if fh.read() != bundle.program_src:
                raise ValueError(
                    "bundle model.psl does not match its manifest parameters"
                )
    return bundle
