from __future__ import annotations

from pathlib import Path

import pytest

from microchor.model import ChoreographyPackage
from microchor.parser import parse_package

REPO_ROOT = Path(__file__).resolve().parent.parent
CORPUS = REPO_ROOT / "corpus"

ACCIDENT_DOC = CORPUS / "annex_accident.cdl"

ACCIDENT_ROLES = (
    "VehiculoAccidentadoRole",
    "BalizaRole",
    "CentralBalizasRole",
    "VehiculoTransitoRole",
    "CentralEmergenciasRole",
)


@pytest.fixture(scope="session")
def accident_text() -> str:
    return ACCIDENT_DOC.read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def accident_pkg(accident_text: str) -> ChoreographyPackage:
    return parse_package(accident_text)
