"""
Dataset manifest: one row per cell image with its label and patient id.
"""
import logging
import re
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np
import pandas as pd

from ..exceptions import IngestionError, PreparationError, ShapeError
from .preprocessing import ImagePatch, load_patch, resample, save_patch

logger = logging.getLogger(__name__)

COLUMNS = ["path", "label", "patient_id"]
LABELS = {"parasitized": 1, "uninfected": 0}
LABEL_NAMES = {value: key for key, value in LABELS.items()}
UNKNOWN_PATIENT = "unknown"
MANIFEST_FILE = "manifest.csv"


def parse_label(token: str, where: str = "") -> int:
    """Map a label token (class name or 0/1) to the integer encoding."""
    text = str(token).strip().lower()
    if text in LABELS:
        return LABELS[text]
    if text in ("0", "1"):
        return int(text)
    raise IngestionError(f"Unknown label '{token}'{where}; expected one of {sorted(LABELS)}")


class Manifest:
    """
    Validated dataset index backed by a pandas DataFrame.

    Labels are stored as integers (parasitized = 1). Extra columns (for
    example the source row of an augmented copy) are carried along.
    """

    def __init__(self, frame: pd.DataFrame):
        self.frame = frame.reset_index(drop=True)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, source: str = "<frame>") -> "Manifest":
        missing = [column for column in COLUMNS if column not in frame.columns]
        if missing:
            raise IngestionError(f"{source}: missing column(s) {missing}, header must be {','.join(COLUMNS)}")
        frame = frame.copy()
        labels = []
        for position, token in enumerate(frame["label"].tolist()):
            labels.append(parse_label(token, f" at line {position + 2} of {source}"))
        frame["label"] = np.asarray(labels, dtype=np.int64)
        frame["path"] = frame["path"].astype(str)
        frame["patient_id"] = frame["patient_id"].astype(str).replace("", UNKNOWN_PATIENT)

        duplicated = frame["path"].duplicated()
        if duplicated.any():
            position = int(np.flatnonzero(duplicated.to_numpy())[0])
            raise IngestionError(
                f"Duplicate path '{frame['path'].iloc[position]}' at line {position + 2} of {source}"
            )
        return cls(frame)

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def paths(self) -> np.ndarray:
        return self.frame["path"].to_numpy()

    @property
    def labels(self) -> np.ndarray:
        return self.frame["label"].to_numpy(dtype=np.int64)

    @property
    def patients(self) -> np.ndarray:
        return self.frame["patient_id"].to_numpy()

    def counts(self) -> Dict[str, int]:
        labels = self.labels
        return {name: int(np.sum(labels == value)) for name, value in LABELS.items()}

    def subset(self, indices: Iterable[int]) -> "Manifest":
        return Manifest(self.frame.iloc[list(indices)])

    def with_patients(self, patients: Dict[str, str]) -> "Manifest":
        """Override patient ids by path (or file name) from an explicit map."""
        frame = self.frame.copy()
        names = frame["path"].map(lambda p: Path(p).name)
        frame["patient_id"] = [
            patients.get(path, patients.get(name, current))
            for path, name, current in zip(frame["path"], names, frame["patient_id"])
        ]
        return Manifest(frame)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame = self.frame.copy()
        frame["label"] = frame["label"].map(LABEL_NAMES)
        frame.to_csv(path, index=False)
        return path


def load_manifest(path: Union[str, Path], root: Optional[Union[str, Path]] = None) -> Manifest:
    """
    Read and validate a `path,label,patient_id` manifest.

    Args:
        path: Manifest CSV
        root: Directory relative image paths resolve against (manifest's
            own directory when None)

    Returns:
        Manifest with absolute-or-root-relative paths
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"Manifest not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise IngestionError(f"Manifest {path} is empty")
    if frame.empty:
        raise IngestionError(f"Manifest {path} has no rows")

    base = Path(root) if root is not None else path.parent
    manifest = Manifest.from_frame(frame, source=str(path))
    manifest.frame["path"] = [
        p if Path(p).is_absolute() else str(base / p) for p in manifest.frame["path"]
    ]
    counts = manifest.counts()
    logger.info(f"Loaded manifest {path}: {len(manifest)} rows, {counts}")
    return manifest


def load_patient_map(path: Union[str, Path]) -> Dict[str, str]:
    """Read a `path,patient_id` override file."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"Patient override file not found: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if not {"path", "patient_id"} <= set(frame.columns):
        raise IngestionError(f"{path}: header must contain path,patient_id")
    return dict(zip(frame["path"], frame["patient_id"]))


_PATIENT_PREFIX = re.compile(r"^(C\d+P\d+)", re.IGNORECASE)
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def patient_from_filename(name: str) -> str:
    """NIH-style `C<slide>P<patient>...` prefix, else "unknown"."""
    match = _PATIENT_PREFIX.match(Path(name).name)
    return match.group(1).upper() if match else UNKNOWN_PATIENT


def _class_folder(raw_dir: Path, label_name: str) -> Path:
    for child in sorted(raw_dir.iterdir()):
        if child.is_dir() and child.name.lower() == label_name:
            return child
    raise PreparationError(f"{raw_dir}: missing '{label_name}' class folder")


def scan_image_dir(raw_dir: Union[str, Path]) -> Manifest:
    """
    Index a raw dataset directory with one subfolder per class.

    Folder names match case-insensitively (Parasitized/ and Uninfected/
    in the NIH download). Files are listed in sorted order.
    """
    raw_dir = Path(raw_dir)
    if not raw_dir.is_dir():
        raise PreparationError(f"Raw image directory not found: {raw_dir}")
    rows = []
    for label_name, label in sorted(LABELS.items(), key=lambda item: -item[1]):
        folder = _class_folder(raw_dir, label_name)
        for image_path in sorted(folder.iterdir()):
            if image_path.suffix.lower() in IMAGE_SUFFIXES:
                rows.append({"path": str(image_path), "label": label, "patient_id": patient_from_filename(image_path.name)})
    if not rows:
        raise PreparationError(f"{raw_dir}: class folders hold no images")
    return Manifest(pd.DataFrame(rows, columns=COLUMNS))


def prepare_dataset(
    raw_dir: Union[str, Path],
    out_dir: Union[str, Path],
    target_size: int = 200,
    patients: Optional[Dict[str, str]] = None,
) -> Tuple[Manifest, int]:
    """
    Resample every readable image into a patch cache and write its manifest.

    Args:
        raw_dir: Directory with parasitized/ and uninfected/ subfolders
        out_dir: Receives patches/<class>/<name>.png and manifest.csv
        target_size: Square patch side
        patients: Optional path-or-filename -> patient id override

    Returns:
        Tuple of (manifest with cached patch paths, number of skipped images)
    """
    scanned = scan_image_dir(raw_dir)
    if patients:
        scanned = scanned.with_patients(patients)
    out_dir = Path(out_dir)
    rows = []
    skipped = 0
    for path, label, patient in zip(scanned.paths, scanned.labels, scanned.patients):
        try:
            patch = ImagePatch(resample(load_patch(path), target_size), int(label), patient, path)
        except (IngestionError, ShapeError) as e:
            logger.warning(f"Skipping unreadable image: {e}")
            skipped += 1
            continue
        relative = Path("patches") / LABEL_NAMES[patch.label] / f"{Path(path).stem}.png"
        save_patch(out_dir / relative, patch.pixels)
        rows.append({"path": relative.as_posix(), "label": patch.label, "patient_id": patch.patient_id})
    if not rows:
        raise PreparationError(f"{raw_dir}: no readable images")

    manifest = Manifest(pd.DataFrame(rows, columns=COLUMNS))
    manifest.to_csv(out_dir / MANIFEST_FILE)
    logger.info(f"Prepared {len(manifest)} patches ({skipped} skipped) in {out_dir}: {manifest.counts()}")
    manifest.frame["path"] = [str(out_dir / p) for p in manifest.frame["path"]]
    return manifest, skipped
