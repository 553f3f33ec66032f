"""n-shot evaluation protocol, candidate-class projection and report tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import GRN, GrnConfig, ProtocolError
from .training import TrainReport, fit, sample_support

DEFAULT_SEEDS = tuple(range(10))
SHOTS = (1, 5, 25)


class TaxonomyError(KeyError):
    pass


@dataclass
class EvalResult:
    """Accuracies of independent fit+test repeats of one n-shot protocol."""

    n_shots: int
    seeds: list[int]
    accuracies: list[float]
    reports: list[TrainReport] = field(default_factory=list, repr=False)
    best_model: GRN | None = field(default=None, repr=False)
    best_prototypes: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.seeds) != len(self.accuracies):
            raise ValueError("one accuracy per seed")
        for a in self.accuracies:
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"accuracy {a} outside [0, 1]")

    @classmethod
    def from_accuracies(cls, accuracies, n_shots=0, seeds=None) -> "EvalResult":
        accuracies = [float(a) for a in accuracies]
        seeds = list(seeds) if seeds is not None else list(range(len(accuracies)))
        return cls(n_shots, seeds, accuracies)

    @property
    def max(self) -> float:
        return float(np.max(self.accuracies))

    @property
    def avg(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        """Population standard deviation (divisor N)."""
        return float(np.std(self.accuracies))

    @property
    def best_index(self) -> int:
        # first maximum in seed order, so selection is stable
        return int(np.argmax(self.accuracies))

    @property
    def best_seed(self) -> int:
        return self.seeds[self.best_index]

    def to_dict(self) -> dict:
        return {
            "n_shots": self.n_shots,
            "seeds": list(self.seeds),
            "accuracies": list(self.accuracies),
            "max": self.max,
            "avg": self.avg,
            "std": self.std,
            "best_seed": self.best_seed,
            "epochs": [r.epochs for r in self.reports],
        }


def split_support(labels, n_shots, seed, n_classes=None):
    """Support rows and the disjoint test rows (every non-support trial)."""
    labels = np.asarray(labels)
    support = sample_support(labels, n_shots, seed, n_classes)
    test = np.setdiff1d(np.arange(len(labels)), support.flat)
    if np.intersect1d(support.flat, test).size:
        raise ProtocolError("support and test overlap")
    if test.size == 0:
        raise ProtocolError("no trials left for testing")
    return support, test


def run_protocol(
    x,
    labels,
    n_shots: int,
    seeds=DEFAULT_SEEDS,
    config: GrnConfig | None = None,
    keep_best: bool = True,
    **fit_kwargs,
) -> EvalResult:
    """Fit and test one GRN per seed on a fresh n-shot support draw.

    Each class needs at least ``n_shots + 1`` trials so that every class is
    represented in the test split. ``fit_kwargs`` go to :func:`fit`.
    """
    x = np.asarray(x)
    labels = np.asarray(labels)
    config = config or GrnConfig(n_classes=int(labels.max()) + 1)
    counts = np.bincount(labels, minlength=config.n_classes)
    if counts.min() < n_shots + 1:
        raise ProtocolError(f"{n_shots}-shot needs {n_shots + 1} trials per class, smallest class has {counts.min()}")
    result = EvalResult(n_shots, [], [])
    best_acc = -1.0
    for seed in seeds:
        support, test = split_support(labels, n_shots, seed, config.n_classes)
        model, protos, report = fit(x[support.flat], support.labels, config, seed=seed, **fit_kwargs)
        pred = model.predict(x[test], protos)
        acc = float(np.mean(pred.classes == labels[test]))
        result.seeds.append(int(seed))
        result.accuracies.append(acc)
        result.reports.append(report)
        if keep_best and acc > best_acc:
            best_acc = acc
            result.best_model, result.best_prototypes = model, protos
    return result


# -- candidate classes ---------------------------------------------------------


@dataclass(frozen=True)
class ClassTaxonomy:
    """Sub-parts in prototype order, their representative class, and candidate mapping."""

    subparts: tuple[str, ...]
    representative: dict
    candidates: dict

    def __post_init__(self):
        if set(self.representative) != set(self.subparts):
            raise TaxonomyError("every sub-part needs exactly one representative class")
        for name, part in self.candidates.items():
            if part not in self.subparts:
                raise TaxonomyError(f"candidate {name} maps to unknown sub-part {part}")

    @classmethod
    def default(cls) -> "ClassTaxonomy":
        return cls(
            ("upper-arm", "forearm", "hand"),
            {"upper-arm": "forward_reach", "forearm": "left_twist", "hand": "cylindrical_grasp"},
            {
                "backward_reach": "upper-arm",
                "left_reach": "upper-arm",
                "right_reach": "upper-arm",
                "up_reach": "upper-arm",
                "down_reach": "upper-arm",
                "right_twist": "forearm",
                "lateral_grasp": "hand",
                "spherical_grasp": "hand",
            },
        )

    @property
    def representative_classes(self) -> list[str]:
        return [self.representative[p] for p in self.subparts]

    def subpart_of(self, class_name: str) -> str:
        for part, name in self.representative.items():
            if name == class_name:
                return part
        try:
            return self.candidates[class_name]
        except KeyError:
            raise TaxonomyError(f"class {class_name!r} has no sub-part mapping") from None

    def target_index(self, class_name: str) -> int:
        return self.subparts.index(self.subpart_of(class_name))


@dataclass
class CandidateResult:
    accuracy: float
    per_class: dict
    n_trials: int

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "per_class": dict(self.per_class), "n_trials": self.n_trials}


def evaluate_candidates(x, class_names, model: GRN, prototypes, taxonomy: ClassTaxonomy | None = None) -> CandidateResult:
    """Project candidate trials onto the sub-part prototypes.

    ``class_names[i]`` names trial ``i``; a prediction is correct iff it is
    the sub-part that the taxonomy assigns to that class.
    """
    taxonomy = taxonomy or ClassTaxonomy.default()
    if len(x) != len(class_names):
        raise ValueError(f"{len(x)} trials but {len(class_names)} class names")
    if len(prototypes) != len(taxonomy.subparts):
        raise ProtocolError(f"need {len(taxonomy.subparts)} sub-part prototypes, got {len(prototypes)}")
    targets = np.array([taxonomy.target_index(c) for c in class_names])
    if len(targets) == 0:
        return CandidateResult(float("nan"), {}, 0)
    pred = model.predict(x, prototypes).classes
    hit = pred == targets
    per_class = {}
    for name in dict.fromkeys(class_names):
        mask = np.array([c == name for c in class_names])
        per_class[name] = float(hit[mask].mean())
    return CandidateResult(float(hit.mean()), per_class, len(targets))


# -- report tables -------------------------------------------------------------


@dataclass
class ReportTable:
    """Rows are subjects; per session block, ``Max/Avg/Std`` for every shot count.

    ``cells[subject][session]`` holds ``3 * len(shots)`` numbers (percent for
    Max/Avg, points for Std). With several sessions an ``Avg.`` block holds the
    element-wise mean over sessions; with several subjects an ``Avg.`` row
    holds the mean over subjects.
    """

    sessions: list[str]
    shots: list[int]
    subjects: list[str]
    cells: dict

    @property
    def blocks(self) -> list[str]:
        return self.sessions + (["Avg."] if len(self.sessions) > 1 else [])

    def row(self, subject) -> list[float]:
        out = []
        for block in self.blocks:
            out.extend(self.cells[subject][block])
        return out

    @property
    def rows(self) -> list[tuple[str, list[float]]]:
        body = [(s, self.row(s)) for s in self.subjects]
        if len(self.subjects) > 1:
            mean = np.mean([r for _, r in body], axis=0)
            body.append(("Avg.", [float(v) for v in mean]))
        return body

    def header(self) -> list[str]:
        cols = ["Subject"]
        for block in self.blocks:
            for n in self.shots:
                cols += [f"{block} {n}-shot {stat}" for stat in ("Max", "Avg", "Std")]
        return cols

    def render(self) -> str:
        if not self.subjects:
            return ""
        width = 8
        lines = []
        top = " " * 10
        mid = " " * 10
        for block in self.blocks:
            top += f"| {block:<{3 * width * len(self.shots) - 1}}"
            for n in self.shots:
                mid += f"| {str(n) + '-shot':<{3 * width - 1}}"
        lines += [top, mid]
        stats = "Subjects  " + "".join(
            f"|{'Max.':>{width - 1}}{'Avg.':>{width}}{'Std.':>{width}}" for _ in range(len(self.blocks) * len(self.shots))
        )
        lines.append(stats)
        lines.append("-" * len(stats))
        for name, values in self.rows:
            cells = []
            for i in range(0, len(values), 3):
                mx, av, sd = values[i : i + 3]
                cells.append(f"|{mx:>{width - 2}.2f}%{av:>{width - 1}.2f}%{sd:>{width}.2f}")
            lines.append(f"{name:<10}" + "".join(cells))
        return "\n".join(lines) + "\n"

    def to_csv(self, delimiter=",") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        if not self.subjects:
            return ""
        w.writerow(self.header())
        for name, values in self.rows:
            w.writerow([name] + [repr(float(v)) for v in values])
        return buf.getvalue()


def aggregate_table(results: dict, shots=SHOTS) -> ReportTable:
    """``results[subject][session][n_shots] -> EvalResult`` into the report layout.

    Missing shot counts render as NaN so the column layout stays fixed.
    """
    subjects = list(results)
    sessions = []
    for subj in subjects:
        for sess in results[subj]:
            if sess not in sessions:
                sessions.append(sess)
    cells = {}
    for subj in subjects:
        cells[subj] = {}
        for sess in sessions:
            block = []
            for n in shots:
                r = results[subj].get(sess, {}).get(n)
                if r is None:
                    block += [np.nan] * 3
                else:
                    block += [100.0 * r.max, 100.0 * r.avg, 100.0 * r.std]
            cells[subj][sess] = block
        if len(sessions) > 1:
            cells[subj]["Avg."] = [float(v) for v in np.mean([cells[subj][s] for s in sessions], axis=0)]
    return ReportTable(list(sessions), list(shots), subjects, cells)


def export_embeddings(model: GRN, x, labels, path, class_names=None, delimiter=",") -> Path:
    """One row per trial: label, then the flattened (G, C, T) embedding."""
    path = Path(path)
    emb = model.encode(np.asarray(x), "eval")
    flat = emb.reshape(len(emb), -1)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        g, c, t = emb.shape[1:]
        w.writerow(["label"] + [f"g{i}c{j}t{k}" for i in range(g) for j in range(c) for k in range(t)])
        for lab, row in zip(labels, flat):
            name = class_names[int(lab)] if class_names is not None else int(lab)
            w.writerow([name] + [repr(float(v)) for v in row])
    return path
