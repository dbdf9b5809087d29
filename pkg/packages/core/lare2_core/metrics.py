from dataclasses import dataclass

from .errors import ParameterError, UndefinedMetricError

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class ScoredSet:
    """Detector probabilities with labels (1 = fake, the positive class) and image ids."""

    scores: tuple[float, ...]
    labels: tuple[int, ...]
    ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if not len(self.scores) == len(self.labels) == len(self.ids):
            raise ParameterError(
                f"scores, labels and ids differ in length: "
                f"{len(self.scores)}, {len(self.labels)}, {len(self.ids)}"
            )
        if any(not 0.0 <= score <= 1.0 for score in self.scores):
            raise ParameterError("scores must lie in [0, 1]")
        if any(label not in (0, 1) for label in self.labels):
            raise ParameterError("labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.scores)


def accuracy(scored: ScoredSet, threshold: float = DEFAULT_THRESHOLD) -> float:
    if not len(scored):
        raise ParameterError("accuracy of an empty set")
    correct = sum(
        int(score >= threshold) == label for score, label in zip(scored.scores, scored.labels)
    )
    return correct / len(scored)


def average_precision(scored: ScoredSet) -> float:
    """
    Non-interpolated AP: mean of precision@k over the ranks k of positives,
    ranking by descending score with ties broken by ascending id.
    """
    positives = sum(scored.labels)
    if positives == 0:
        raise UndefinedMetricError("average precision is undefined without positive labels")

    ranked = sorted(zip(scored.scores, scored.ids, scored.labels), key=lambda item: (-item[0], item[1]))
    hits = 0
    total = 0.0
    for rank, (_, _, label) in enumerate(ranked, start=1):
        if label:
            hits += 1
            total += hits / rank
    return total / positives
