"""Build the bundled byte-level text corpus from the system's license texts.

Paragraphs are assigned round-robin: every tenth paragraph goes to the
held-out split, the rest to the training split.
"""
import hashlib
import pathlib
import sys

SRC = pathlib.Path("/usr/share/common-licenses")


def main(out_dir: str) -> None:
    seen = set()
    paragraphs = []
    for path in sorted(SRC.iterdir()):
        if path.is_dir():
            continue
        text = path.read_text(encoding="utf-8", errors="replace")
        digest = hashlib.sha256(text.encode()).hexdigest()
        if digest in seen:
            continue
        seen.add(digest)
        for para in text.split("\n\n"):
            para = "\n".join(line.rstrip() for line in para.strip("\n").splitlines())
            if para.strip():
                paragraphs.append(para)
    train = [p for i, p in enumerate(paragraphs) if i % 10 != 9]
    heldout = [p for i, p in enumerate(paragraphs) if i % 10 == 9]
    out = pathlib.Path(out_dir)
    (out / "corpus_train.txt").write_text("\n\n".join(train) + "\n", encoding="utf-8")
    (out / "corpus_heldout.txt").write_text("\n\n".join(heldout) + "\n", encoding="utf-8")
    print(len(paragraphs), "paragraphs;", sum(map(len, train)), "train chars;", sum(map(len, heldout)), "held-out chars")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/data")
