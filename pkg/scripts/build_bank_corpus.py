"""Write the natural-image corpus used to learn the packaged filter banks.

Requires scikit-image (only for its bundled sample images):

    python scripts/build_bank_corpus.py corpus/
    mvpad gen-filters --corpus corpus/ --out src/mvpad/banks --seed 0
"""
import sys
from pathlib import Path

import numpy as np
import skimage.data
from PIL import Image

IMAGES = ("camera", "astronaut", "coffee", "chelsea", "grass", "gravel", "brick", "rocket",
          "moon", "coins")


def main(out: str) -> None:
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    for name in IMAGES:
        arr = np.asarray(getattr(skimage.data, name)())
        Image.fromarray(arr).save(root / f"{name}.png")
        print(root / f"{name}.png")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "corpus")
