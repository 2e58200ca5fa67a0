"""Write the leakage benchmark scenes and the query-analysis scene.

Each benchmark scene pairs subjects that differ only in colour, so any colour
mixing between boxes shows up as a miscounted or misplaced component.  The
analysis scene holds two squares of similar colours (red and magenta share
the red channel) side by side.
"""
import argparse
import json
from pathlib import Path

from bounded_attention.denoiser.dataset import make_scene

# (colour, shape, (row0, col0, row1, col1)) on a 16x16 grid
SCENES = {
    "01_red_blue_squares": [("red", "square", (4, 1, 11, 8)), ("blue", "square", (4, 9, 11, 16))],
    "02_green_magenta_circles": [("green", "circle", (1, 1, 9, 9)), ("magenta", "circle", (8, 8, 16, 16))],
    "03_yellow_cyan_triangles": [("yellow", "triangle", (2, 0, 10, 8)), ("cyan", "triangle", (6, 8, 14, 16))],
    "04_red_green_blue_squares": [("red", "square", (1, 1, 7, 7)), ("green", "square", (1, 9, 7, 15)),
                                  ("blue", "square", (9, 5, 15, 11))],
    "05_blue_yellow_magenta_circles": [("blue", "circle", (0, 0, 7, 7)), ("yellow", "circle", (9, 1, 16, 8)),
                                       ("magenta", "circle", (4, 9, 11, 16))],
    "06_cyan_red_squares_stacked": [("cyan", "square", (0, 4, 7, 11)), ("red", "square", (9, 4, 16, 11))],
}

ANALYSIS = {
    "red_magenta_squares": [("red", "square", (4, 1, 11, 8)), ("magenta", "square", (4, 9, 11, 16))],
}


def write(out, scenes):
    out.mkdir(parents=True, exist_ok=True)
    for name, subjects in scenes.items():
        scene = make_scene(subjects, 16, 16)
        (out / f"{name}.json").write_text(json.dumps(scene.to_dict(), indent=2) + "\n")
        print(out / f"{name}.json")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "scenes"))
    args = ap.parse_args()
    write(Path(args.out) / "leakage", SCENES)
    write(Path(args.out) / "analysis", ANALYSIS)


if __name__ == "__main__":
    main()
