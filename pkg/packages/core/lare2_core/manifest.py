import json
import logging
from collections.abc import Iterator
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import DataError

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
REAL_TAG = "real"


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    path: str
    label: int
    generator: str
    split: str

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise DataError(f"{self.id}: label must be 0 or 1, got {self.label}")
        if self.split not in SPLITS:
            raise DataError(f"{self.id}: unknown split '{self.split}'")

    @property
    def subset(self) -> str:
        """Subset tag, the id prefix before the first '/'."""
        return self.id.split("/", 1)[0]

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "path": self.path,
                "label": self.label,
                "generator": self.generator,
                "split": self.split,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "ManifestRecord":
        try:
            data = json.loads(line)
            return cls(
                id=data["id"],
                path=data["path"],
                label=int(data["label"]),
                generator=data["generator"],
                split=data["split"],
            )
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DataError(f"Malformed manifest line: {line!r}") from e


@dataclass(frozen=True)
class DatasetManifest:
    """Labeled image records; paths are relative to `root`."""

    records: tuple[ManifestRecord, ...]
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for record in self.records:
            if record.id in seen:
                raise DataError(f"Duplicate manifest id: {record.id}")
            seen.add(record.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ManifestRecord]:
        return iter(self.records)

    @property
    def ids(self) -> list[str]:
        return [record.id for record in self.records]

    def resolve(self, record: ManifestRecord) -> Path:
        return self.root / record.path

    def paths(self) -> list[Path]:
        return [self.resolve(record) for record in self.records]

    def filter(
        self,
        *,
        split: str | None = None,
        label: int | None = None,
        generator: str | None = None,
        subset: str | None = None,
    ) -> "DatasetManifest":
        return replace(
            self,
            records=tuple(
                record
                for record in self.records
                if (split is None or record.split == split)
                and (label is None or record.label == label)
                and (generator is None or record.generator == generator)
                and (subset is None or record.subset == subset)
            ),
        )

    def subsets(self) -> list[str]:
        return list(dict.fromkeys(record.subset for record in self.records))

    def check_paths(self) -> None:
        for record in self.records:
            if not self.resolve(record).exists():
                raise DataError(f"{record.id}: image not found at {self.resolve(record)}")

    def serialize(self) -> str:
        return "".join(f"{record.to_json()}\n" for record in self.records)

    @classmethod
    def parse(cls, text: str, root: Path = Path(".")) -> "DatasetManifest":
        return cls(
            records=tuple(
                ManifestRecord.from_json(line) for line in text.splitlines() if line.strip()
            ),
            root=root,
        )

    def write(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.serialize(), encoding="utf-8")
        logger.info(f"Wrote manifest with {len(self)} records to {path}")

    @classmethod
    def read(cls, path: Path) -> "DatasetManifest":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise DataError(f"Cannot read manifest {path}: {e}") from e
        return cls.parse(text, root=path.parent)
