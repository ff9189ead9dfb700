"""Regenerate ``fixtures/``: mock tools, a scripted policy, a mock judge and
a five-prompt smoke corpus. Output is deterministic; rerun after editing."""

from __future__ import annotations

import json
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent / "fixtures"


def call(name: str, **arguments) -> str:
    return json.dumps({"name": name, "arguments": arguments})


def tool_round(think: str, name: str, **arguments) -> str:
    return f"<think>{think}</think>\n<tool_call>\n{call(name, **arguments)}\n</tool_call>"


def answer_round(think: str, gen_prompt: str, refs: list[tuple[str, str]]) -> str:
    body = {"gen_prompt": gen_prompt, "reference_images": [{"img_id": i, "note": n} for i, n in refs]}
    return f"<think>{think}</think>\n<answer>\n{json.dumps(body)}\n</answer>"


PROMPTS = [
    {"id": "p1", "category": "astronomy",
     "prompt": "The James Webb Space Telescope unfolding its sunshield above Earth"},
    {"id": "p2", "category": "films",
     "prompt": "A poster of the lead actor of the 2023 Oppenheimer film standing in the Los Alamos desert"},
    {"id": "p3", "category": "architecture",
     "prompt": "The tallest building completed in 2010 lit up at dusk"},
    {"id": "p4", "category": "games",
     "prompt": "Cover art for the 2017 Zelda game with the hero on a cliff"},
    {"id": "p5", "category": "chemistry",
     "prompt": "A lab bench showing the element discovered by Marie Curie glowing in a vial"},
]

SCRIPTS = {
    # search -> image_search -> answer
    PROMPTS[0]["prompt"]: [
        tool_round("Confirm what the sunshield looks like.", "search", queries=["James Webb sunshield deployment"]),
        tool_round("Need a visual reference.", "image_search", query="James Webb Space Telescope sunshield"),
        answer_round(
            "IMG_001 shows the deployed telescope.",
            "The James Webb Space Telescope as in the first reference image, its five-layer silver-violet "
            "sunshield half unfolded, Earth curving below, deep black space, photorealistic.",
            [("IMG_001", "telescope shape and sunshield")],
        ),
    ],
    # two image searches, two references
    PROMPTS[1]["prompt"]: [
        tool_round("Who played the lead?", "search", queries=["Oppenheimer 2023 lead actor"]),
        tool_round("Actor's face.", "image_search", query="Cillian Murphy portrait"),
        tool_round("Location reference.", "image_search", query="Los Alamos desert landscape"),
        answer_round(
            "Actor is IMG_001, desert is IMG_003.",
            "Film poster: the man from the first reference image in a 1940s suit and fedora, standing in the "
            "desert landscape of the second reference image at dawn, bold title lettering 'OPPENHEIMER'.",
            [("IMG_001", "actor identity"), ("IMG_003", "desert scenery")],
        ),
    ],
    # search -> browse -> image_search -> answer
    PROMPTS[2]["prompt"]: [
        tool_round("Find the building.", "search", queries=["tallest building completed 2010"]),
        tool_round("Check details.", "browse", url="https://example.org/burj-khalifa", query="height and opening year"),
        tool_round("Visual reference.", "image_search", query="Burj Khalifa dusk"),
        answer_round(
            "Use the only image.",
            "The Burj Khalifa from the only reference image, 828 m tall, its facade lit in gold at dusk over Dubai.",
            [("IMG_001", "building silhouette")],
        ),
    ],
    # never produces a parseable round: falls back after the format retry
    PROMPTS[3]["prompt"]: [
        "I think the answer is Breath of the Wild.",
        "<think>oops</think> still no action",
    ],
    # answers with an id it never retrieved: fails validation, falls back
    PROMPTS[4]["prompt"]: [
        tool_round("Which element?", "search", queries=["element discovered by Marie Curie"]),
        answer_round(
            "Radium.",
            "A vial of radium glowing faint blue on a lab bench, as in the first reference image.",
            [("IMG_009", "glow")],
        ),
    ],
}

SEARCH = {
    "results": {
        "James Webb sunshield deployment": [
            {"title": "Webb sunshield", "url": "https://example.org/webb-sunshield",
             "snippet": "Five tennis-court-sized layers of Kapton unfold in space."},
        ],
        "Oppenheimer 2023 lead actor": [
            {"title": "Oppenheimer (film)", "url": "https://example.org/oppenheimer-film",
             "snippet": "Cillian Murphy stars as J. Robert Oppenheimer."},
        ],
        "tallest building completed 2010": [
            {"title": "Burj Khalifa", "url": "https://example.org/burj-khalifa",
             "snippet": "Opened January 2010 in Dubai; 828 metres."},
        ],
        "element discovered by Marie Curie": [
            {"title": "Radium", "url": "https://example.org/radium",
             "snippet": "Discovered by Marie and Pierre Curie in 1898; radioluminescent."},
        ],
    },
    "unavailable": [],
}

IMAGES = {
    "results": {
        "James Webb Space Telescope sunshield": [
            {"title": "JWST deployed", "url": "https://img.example.org/jwst.jpg", "local_path": "images/jwst.jpg"},
        ],
        "Cillian Murphy portrait": [
            {"title": "Portrait", "url": "https://img.example.org/cm1.jpg", "local_path": "images/cm1.jpg"},
            {"title": "Red carpet", "url": "https://img.example.org/cm2.jpg", "local_path": "images/cm2.jpg"},
        ],
        "Los Alamos desert landscape": [
            {"title": "Mesa", "url": "https://img.example.org/mesa.jpg", "local_path": "images/mesa.jpg"},
        ],
        "Burj Khalifa dusk": [
            {"title": "Burj at dusk", "url": "https://img.example.org/burj.jpg", "local_path": "images/burj.jpg"},
        ],
    },
    "unavailable": [],
}

BROWSE = {
    "pages": {
        "https://example.org/burj-khalifa": {
            "summary": "Burj Khalifa, Dubai. Height 828 m. Opened 4 January 2010.",
            "by_query": {"height and opening year": "828 m; officially opened 4 January 2010."},
        }
    }
}


def judgment(f: float, v: float, t: float, a: float, na: bool) -> dict:
    return {"rationale": "fixture judgment", "faithfulness": f, "visual_correctness": v,
            "text_accuracy": t, "aesthetics": a, "text_accuracy_na": na}


JUDGE = {
    "replies": {
        "gen/p1_0.png": judgment(1.0, 0.5, 0.5, 1.0, True),
        "gen/p2_0.png": judgment(1.0, 1.0, 0.5, 1.0, False),
        "gen/p3_0.png": judgment(0.5, 0.5, 0.5, 1.0, True),
        # first attempt is malformed to exercise the judge retry path
        "gen/p4_0.png": ["not json", judgment(0.5, 0.0, 0.0, 0.5, False)],
        "gen/p5_0.png": judgment(0.5, 0.0, 0.5, 0.5, True),
    }
}


# Judged-sample file whose subset means round to the Qwen-Image row of the
# benchmark table. Each dimension is given as a total in half-points
# (level 1 = 2, level 0.5 = 1) so the means are exact rationals.
TABLE_ROW = {
    # subset: (category, n, n_text_applicable, {dim: half-point total})
    "sci": ("physics", 294, 294, {"visual_correctness": 40, "text_accuracy": 2,
                                  "faithfulness": 279, "aesthetics": 334}),
    "pop": ("anime", 336, 250, {"visual_correctness": 51, "text_accuracy": 7,
                                "faithfulness": 463, "aesthetics": 416}),
}


def spread(total: int, n: int) -> list[float]:
    """n levels in {0, 0.5, 1} whose half-point sum is ``total``."""
    assert 0 <= total <= 2 * n
    levels = [1.0] * (total // 2) + [0.5] * (total % 2)
    return levels + [0.0] * (n - len(levels))


def table_rows() -> list[dict]:
    rows = []
    for name, (category, n, n_text, totals) in TABLE_ROW.items():
        cols = {d: spread(t, n if d != "text_accuracy" else n_text) for d, t in totals.items()}
        for i in range(n):
            na = i >= n_text
            j = judgment(
                cols["faithfulness"][i], cols["visual_correctness"][i],
                0.5 if na else cols["text_accuracy"][i], cols["aesthetics"][i], na,
            )
            rows.append({"id": f"{name}-{i:03d}", "category": category, "judgment": j})
    return rows


def dump(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def main() -> None:
    dump(ROOT / "policy.json", {"scripts": SCRIPTS, "repeat_last": False})
    dump(ROOT / "tools" / "search.json", SEARCH)
    dump(ROOT / "tools" / "image_search.json", IMAGES)
    dump(ROOT / "tools" / "browse.json", BROWSE)
    dump(ROOT / "judge" / "kscore.json", JUDGE)
    with open(ROOT / "prompts.jsonl", "w", encoding="utf-8") as f:
        for p in PROMPTS:
            f.write(json.dumps({"id": p["id"], "prompt": p["prompt"]}) + "\n")
    with open(ROOT / "bench.jsonl", "w", encoding="utf-8") as f:
        for p in PROMPTS:
            row = {**p, "gt_image": f"gt/{p['id']}.png", "gen_image": f"gen/{p['id']}_0.png"}
            f.write(json.dumps(row) + "\n")
    with open(ROOT / "baseline_qwen_image.jsonl", "w", encoding="utf-8") as f:
        for row in table_rows():
            f.write(json.dumps(row) + "\n")


if __name__ == "__main__":
    main()
