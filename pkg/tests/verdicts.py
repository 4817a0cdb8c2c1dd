"""PASS/FAIL bookkeeping for the acceptance criteria."""
_RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str, soft: bool = False) -> bool:
    tag = "PASS" if ok else ("FAIL (soft)" if soft else "FAIL")
    line = f"{tag} criterion {n}: {detail}"
    _RESULTS[n] = line
    print(line, flush=True)
    return ok


def lines() -> list[str]:
    return [_RESULTS[k] for k in sorted(_RESULTS)]
