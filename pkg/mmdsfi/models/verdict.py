from typing import List

from pydantic import BaseModel, Field


class Violation(BaseModel):
    stage: int  # 1..4
    offset: int
    code: str
    detail: str = ""


class VerdictStats(BaseModel):
    reachable_count: int = 0
    cfi_label_count: int = 0
    guard_count: int = 0
    cfi_guard_count: int = 0
    eliminated_guard_equiv: int = 0  # accesses justified by range facts, not an adjacent guard


class Verdict(BaseModel):
    accepted: bool
    violations: List[Violation] = Field(default_factory=list)
    stats: VerdictStats = Field(default_factory=VerdictStats)
    stages_run: List[int] = Field(default_factory=list)
    confine_loads: bool = True
    reachable_offsets: List[int] = Field(default_factory=list)

    def codes(self) -> List[str]:
        return [v.code for v in self.violations]
