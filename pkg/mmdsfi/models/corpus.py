from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, Field, model_validator


class CaseKind(str, Enum):
    BENIGN = "benign"
    ADVERSARIAL = "adversarial"
    ATTACK = "attack"


SUCCESS = "success"


class CorpusCase(BaseModel):
    """One line of corpus/manifest.jsonl."""
    name: str
    kind: CaseKind
    expected: Optional[str] = None  # violation/abort code, fault kind or "success"
    source_path: str  # .sasm goes through the full pipeline, .s is assembled as written
    inputs: List[str] = Field(default_factory=list)  # stdin vectors
    images: List[str] = Field(default_factory=list)  # spawn table entries 1..n
    baseline_images: List[str] = Field(default_factory=list)  # the same spawn table without the attacker
    expect_stdout: Optional[str] = None
    fuzz: int = 0  # extra random stdin vectors for the monitor

    @model_validator(mode="after")
    def _expectation_matches_kind(self):
        if self.kind is CaseKind.BENIGN and self.expected is not None:
            raise ValueError(f"benign case {self.name} cannot expect {self.expected}")
        if self.kind is not CaseKind.BENIGN and not self.expected:
            raise ValueError(f"{self.kind.value} case {self.name} needs an expected outcome")
        if self.baseline_images and (self.kind is not CaseKind.ATTACK or len(self.baseline_images) != len(self.images)):
            raise ValueError(f"case {self.name}: baseline_images must mirror images of an attack case")
        return self

    @property
    def raw(self) -> bool:
        return self.source_path.endswith(".s")


class CaseResult(BaseModel):
    name: str
    kind: CaseKind
    expected: Optional[str] = None
    observed: str = ""
    passed: bool = False
    problems: List[str] = Field(default_factory=list)
