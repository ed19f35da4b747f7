"""Regenerate data/topologies/abilene.json from the built-in link table."""
import sys
from pathlib import Path

from lbsim.net.topology import ABILENE_PATH, abilene_document, build_abilene
from lbsim.utils import write_json


def export(path: Path = ABILENE_PATH, c_hi: float = 20.0, c_lo: float = 10.0) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    write_json(path, abilene_document(c_hi, c_lo))
    topo = build_abilene(c_hi, c_lo)
    print(f"[abilene] {topo.summary()} -> {path}")
    return path


if __name__ == "__main__":
    export(Path(sys.argv[1]) if len(sys.argv) > 1 else ABILENE_PATH)
