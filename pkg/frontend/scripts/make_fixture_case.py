"""Build a small served-case fixture (native volume format) for UI tests."""

import json
import sys
from pathlib import Path

import numpy as np

from vseg.ensemble import suggest_corrections, suggestions_to_json
from vseg.volume import Volume, write_volume

DIMS = (20, 20, 20)
K = 5


def main(case_dir):
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(99)

    fused = np.ones(DIMS, np.uint8)
    fused[10:16, 10:16, 10:16] = 2
    fused[2:5, 12:15, 2:5] = 3
    truth = fused.copy()
    truth[4:7, 4:7, 4:7] = 3

    agreement = np.ones(DIMS, np.float32)
    agreement[4:7, 4:7, 4:7] = 2 / K  # worst blob, 27 voxels
    agreement[12:14, 3:6, 12:14] = 3 / K  # second blob, 12 voxels
    mask = np.ones(DIMS, np.uint8)

    files = {}
    arrays = {
        "t1": (rng.standard_normal(DIMS) * 20 + 100).astype(np.float32),
        "t2": (rng.standard_normal(DIMS) * 20 + 80).astype(np.float32),
        "fused": fused,
        "agreement": agreement,
        "mask": mask,
        "truth": truth,
    }
    for name, arr in arrays.items():
        write_volume(Volume(arr), case_dir / f"{name}.vjson")
        files[name] = f"{name}.vjson"

    (case_dir / "case.json").write_text(json.dumps({
        "id": "ui_fixture",
        "dims": list(DIMS),
        "spacing": [1.0, 1.0, 1.0],
        "classes": ["BG", "CSF", "GM", "WM"],
        "k": K,
        "threshold": 0.6,
        "files": files,
    }, indent=1))

    suggestions = suggest_corrections(agreement, fused, threshold=0.6, min_size=1, mask=mask)
    suggestions_to_json(suggestions, "ui_fixture", K, 0.6,
                        path=case_dir / "suggestions.json")
    print(f"fixture case at {case_dir}: {len(suggestions)} suggestions")


if __name__ == "__main__":
    main(sys.argv[1])
