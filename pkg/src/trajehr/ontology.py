"""Medical-code vocabulary and the ICD-9 top-level chapter map.

The vocabulary is the union of four typed code sets (diagnosis, medication,
lab test, procedure). Every diagnosis code carries exactly one of the 19
ICD-9 chapters; chapter membership is stored explicitly per code in the
vocabulary file rather than re-derived from numeric ranges, so synthetic
vocabularies need not use real ICD-9 identifiers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

from .errors import NotADiagnosis, ParseError, UnknownCode, ValidationError

N_CHAPTERS = 19

# Standard ICD-9-CM top-level chapters, index 1..19 in fixed order.
CHAPTER_LABELS = {
    1: "001-139 Infectious and parasitic diseases",
    2: "140-239 Neoplasms",
    3: "240-279 Endocrine, nutritional and metabolic diseases, and immunity disorders",
    4: "280-289 Diseases of the blood and blood-forming organs",
    5: "290-319 Mental, behavioral and neurodevelopmental disorders",
    6: "320-389 Diseases of the nervous system and sense organs",
    7: "390-459 Diseases of the circulatory system",
    8: "460-519 Diseases of the respiratory system",
    9: "520-579 Diseases of the digestive system",
    10: "580-629 Diseases of the genitourinary system",
    11: "630-679 Complications of pregnancy, childbirth, and the puerperium",
    12: "680-709 Diseases of the skin and subcutaneous tissue",
    13: "710-739 Diseases of the musculoskeletal system and connective tissue",
    14: "740-759 Congenital anomalies",
    15: "760-779 Certain conditions originating in the perinatal period",
    16: "780-799 Symptoms, signs, and ill-defined conditions",
    17: "800-999 Injury and poisoning",
    18: "E000-E999 Supplementary classification of external causes of injury and poisoning",
    19: "V01-V91 Supplementary classification of factors influencing health status",
}

# Numeric range table for the 17 core chapters; E/V resolved by prefix.
_NUMERIC_CHAPTER_RANGES = [
    (1, 139, 1), (140, 239, 2), (240, 279, 3), (280, 289, 4), (290, 319, 5),
    (320, 389, 6), (390, 459, 7), (460, 519, 8), (520, 579, 9), (580, 629, 10),
    (630, 679, 11), (680, 709, 12), (710, 739, 13), (740, 759, 14),
    (760, 779, 15), (780, 799, 16), (800, 999, 17),
]


class CodeType(str, Enum):
    DIAGNOSIS = "D"
    MEDICATION = "M"
    LAB = "L"
    PROCEDURE = "P"


CODE_TYPES = (CodeType.DIAGNOSIS, CodeType.MEDICATION, CodeType.LAB, CodeType.PROCEDURE)


@dataclass(frozen=True)
class Code:
    identifier: str
    code_type: CodeType

    def __post_init__(self):
        if not self.identifier:
            raise ValidationError("code identifier must be nonempty")


def chapter_for_icd9(identifier: str) -> int:
    """Chapter index 1..19 for a real ICD-9 diagnosis string.

    Convenience for building vocabularies from ICD-9-shaped identifiers
    ("414.00", "V45.81", "E812.0"); the loaded vocabulary itself always
    stores chapters explicitly.
    """
    ident = identifier.strip().upper()
    if not ident:
        raise ValidationError("empty identifier has no chapter")
    if ident[0] == "E":
        return 18
    if ident[0] == "V":
        return 19
    head = ident.split(".")[0]
    try:
        num = int(head)
    except ValueError as exc:
        raise ValidationError(f"identifier {identifier!r} is not ICD-9-shaped") from exc
    for lo, hi, chapter in _NUMERIC_CHAPTER_RANGES:
        if lo <= num <= hi:
            return chapter
    raise ValidationError(f"identifier {identifier!r} falls outside ICD-9 chapter ranges")


@dataclass
class Vocabulary:
    """Immutable code universe with dense per-type integer ids.

    Per-type ids are contiguous from 0 in file order; ``global_id`` offsets
    the four type blocks into one flat embedding index (D, M, L, P order).
    """

    codes: list[Code]
    chapter_map: dict[str, int]
    _by_identifier: dict[str, Code] = field(default_factory=dict, repr=False)
    _type_ids: dict[str, int] = field(default_factory=dict, repr=False)
    _type_offsets: dict[CodeType, int] = field(default_factory=dict, repr=False)
    _members: dict[int, frozenset[str]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        seen: dict[str, Code] = {}
        per_type_counter = {ct: 0 for ct in CODE_TYPES}
        for code in self.codes:
            if code.identifier in seen:
                raise ValidationError(f"duplicate identifier {code.identifier!r}")
            seen[code.identifier] = code
            self._type_ids[code.identifier] = per_type_counter[code.code_type]
            per_type_counter[code.code_type] += 1
        self._by_identifier = seen
        offset = 0
        for ct in CODE_TYPES:
            self._type_offsets[ct] = offset
            offset += per_type_counter[ct]

        diagnoses = {c.identifier for c in self.codes if c.code_type is CodeType.DIAGNOSIS}
        extra = set(self.chapter_map) - diagnoses
        if extra:
            raise ValidationError(f"chapter map covers non-diagnosis identifiers: {sorted(extra)[:3]}")
        missing = diagnoses - set(self.chapter_map)
        if missing:
            raise ValidationError(f"diagnosis codes missing a chapter: {sorted(missing)[:3]}")
        for ident, chapter in self.chapter_map.items():
            if not (isinstance(chapter, int) and 1 <= chapter <= N_CHAPTERS):
                raise ValidationError(f"chapter for {ident!r} must be an int in 1..{N_CHAPTERS}, got {chapter!r}")
        members: dict[int, set[str]] = {j: set() for j in range(1, N_CHAPTERS + 1)}
        for ident, chapter in self.chapter_map.items():
            members[chapter].add(ident)
        self._members = {j: frozenset(v) for j, v in members.items()}

    def __contains__(self, identifier: str) -> bool:
        return identifier in self._by_identifier

    def __len__(self) -> int:
        return len(self.codes)

    def get(self, identifier: str) -> Code:
        try:
            return self._by_identifier[identifier]
        except KeyError:
            raise UnknownCode(f"code {identifier!r} not in vocabulary") from None

    def size(self, code_type: CodeType) -> int:
        return sum(1 for c in self.codes if c.code_type is code_type)

    @property
    def sizes(self) -> dict[CodeType, int]:
        return {ct: self.size(ct) for ct in CODE_TYPES}

    def type_id(self, identifier: str) -> int:
        """Dense id of the code within its own type block."""
        self.get(identifier)
        return self._type_ids[identifier]

    def global_id(self, identifier: str) -> int:
        """Dense id of the code in the flat D|M|L|P layout."""
        code = self.get(identifier)
        return self._type_offsets[code.code_type] + self._type_ids[identifier]

    def identifiers(self, code_type: CodeType) -> list[str]:
        return [c.identifier for c in self.codes if c.code_type is code_type]


def chapter_of(vocab: Vocabulary, code: Code | str) -> int:
    """Unique ICD-9 chapter of a diagnosis code present in the vocabulary."""
    identifier = code.identifier if isinstance(code, Code) else code
    resolved = vocab.get(identifier)
    if resolved.code_type is not CodeType.DIAGNOSIS:
        raise NotADiagnosis(f"{identifier!r} has type {resolved.code_type.name}, not DIAGNOSIS")
    return vocab.chapter_map[identifier]


def chapter_members(vocab: Vocabulary, chapter: int) -> frozenset[str]:
    """All diagnosis identifiers mapped to the given chapter (possibly empty)."""
    if not (1 <= chapter <= N_CHAPTERS):
        raise ValidationError(f"chapter index must be in 1..{N_CHAPTERS}, got {chapter}")
    return vocab._members[chapter]


def load_vocabulary(path) -> Vocabulary:
    """Load and validate a vocabulary JSON file.

    Schema: {"diagnosis": [{"code": str, "chapter": int}], "medication": [str],
    "lab": [str], "procedure": [str]}. Ids are assigned in file order per type.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: top level must be a JSON object")

    codes: list[Code] = []
    chapter_map: dict[str, int] = {}
    for entry in raw.get("diagnosis", []):
        if not isinstance(entry, dict) or "code" not in entry or "chapter" not in entry:
            raise ParseError(f"{path}: diagnosis entries need 'code' and 'chapter' fields, got {entry!r}")
        codes.append(Code(str(entry["code"]), CodeType.DIAGNOSIS))
        chapter_map[str(entry["code"])] = entry["chapter"]
    for key, ctype in (("medication", CodeType.MEDICATION), ("lab", CodeType.LAB), ("procedure", CodeType.PROCEDURE)):
        for ident in raw.get(key, []):
            if not isinstance(ident, str):
                raise ParseError(f"{path}: {key} entries must be strings, got {ident!r}")
            codes.append(Code(ident, ctype))
    return Vocabulary(codes=codes, chapter_map=chapter_map)


def save_vocabulary(vocab: Vocabulary, path) -> None:
    payload = {
        "diagnosis": [
            {"code": c.identifier, "chapter": vocab.chapter_map[c.identifier]}
            for c in vocab.codes if c.code_type is CodeType.DIAGNOSIS
        ],
        "medication": vocab.identifiers(CodeType.MEDICATION),
        "lab": vocab.identifiers(CodeType.LAB),
        "procedure": vocab.identifiers(CodeType.PROCEDURE),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
