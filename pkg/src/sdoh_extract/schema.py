"""Category and subtype vocabulary shared by every stage."""

from __future__ import annotations

import enum
from typing import Optional


class Category(str, enum.Enum):
    AGE = "age"
    GENDER = "gender"
    ETHNICITY = "ethnicity"
    SOCIAL_HISTORY = "social_history"
    FAMILY_HISTORY = "family_history"

    @classmethod
    def parse(cls, name: str) -> "Category":
        key = name.strip().lower().replace(" ", "_").replace("-", "_")
        # accept the CamelCase spelling too ("SocialHistory")
        for member in cls:
            if key in (member.value, member.value.replace("_", "")):
                return member
        raise ValueError(f"unknown category {name!r}")

    @property
    def label(self) -> str:
        return _CATEGORY_LABELS[self]

    @property
    def has_subtypes(self) -> bool:
        return self in (Category.SOCIAL_HISTORY, Category.FAMILY_HISTORY)


class Subtype(str, enum.Enum):
    EMPLOYMENT_STATUS = "employment_status"
    ALCOHOL_USE = "alcohol_use"
    TOBACCO_USE = "tobacco_use"
    DRUG_USE = "drug_use"
    EDUCATION_STATUS = "education_status"
    LIVING_STATUS = "living_status"
    OBSERVATION = "observation"
    VITAL = "vital"

    @classmethod
    def parse(cls, name: str) -> "Subtype":
        key = name.strip().lower().replace(" ", "_").replace("-", "_")
        for member in cls:
            if key in (member.value, member.value.replace("_", "")):
                return member
        raise ValueError(f"unknown subtype {name!r}")

    @property
    def category(self) -> Category:
        if self in (Subtype.OBSERVATION, Subtype.VITAL):
            return Category.FAMILY_HISTORY
        return Category.SOCIAL_HISTORY

    @property
    def label(self) -> str:
        return _SUBTYPE_LABELS[self]


_CATEGORY_LABELS = {
    Category.AGE: "Age",
    Category.GENDER: "Gender",
    Category.ETHNICITY: "Ethnicity",
    Category.SOCIAL_HISTORY: "Social History",
    Category.FAMILY_HISTORY: "Family History",
}

_SUBTYPE_LABELS = {
    Subtype.EMPLOYMENT_STATUS: "Employment status",
    Subtype.ALCOHOL_USE: "Alcohol use",
    Subtype.TOBACCO_USE: "Tobacco use",
    Subtype.DRUG_USE: "Drug use",
    Subtype.EDUCATION_STATUS: "Education status",
    Subtype.LIVING_STATUS: "Living status",
    Subtype.OBSERVATION: "Observation",
    Subtype.VITAL: "Vital",
}

Cell = tuple[Category, Optional[Subtype]]

# Row order of the results table: demographics, then social, then family subtypes.
CELL_ORDER: tuple[Cell, ...] = (
    (Category.AGE, None),
    (Category.GENDER, None),
    (Category.ETHNICITY, None),
    (Category.SOCIAL_HISTORY, Subtype.EMPLOYMENT_STATUS),
    (Category.SOCIAL_HISTORY, Subtype.ALCOHOL_USE),
    (Category.SOCIAL_HISTORY, Subtype.TOBACCO_USE),
    (Category.SOCIAL_HISTORY, Subtype.DRUG_USE),
    (Category.SOCIAL_HISTORY, Subtype.EDUCATION_STATUS),
    (Category.SOCIAL_HISTORY, Subtype.LIVING_STATUS),
    (Category.FAMILY_HISTORY, Subtype.OBSERVATION),
    (Category.FAMILY_HISTORY, Subtype.VITAL),
)

_CELL_RANK = {cell: i for i, cell in enumerate(CELL_ORDER)}


def cell_sort_key(cell: Cell) -> int:
    return _CELL_RANK[cell]


def subtypes_of(category: Category) -> tuple[Subtype, ...]:
    return tuple(s for s in Subtype if s.category is category) if category.has_subtypes else ()


def validate_pairing(category: Category, subtype: Optional[Subtype]) -> None:
    """Raise ValueError unless ``subtype`` is legal under ``category``."""
    if category.has_subtypes:
        if subtype is None:
            raise ValueError(f"category {category.value} requires a subtype")
        if subtype.category is not category:
            raise ValueError(
                f"subtype {subtype.value} does not belong to category {category.value}"
            )
    elif subtype is not None:
        raise ValueError(f"category {category.value} takes no subtype (got {subtype.value})")


def cell_name(cell: Cell) -> str:
    category, subtype = cell
    return category.value if subtype is None else f"{category.value}.{subtype.value}"
