"""Dataset file format.

Layout (little-endian)::

    b"SYGT"  u16 version  u32 header_len  header (UTF-8 JSON, sorted keys)
    repeated records:
        u32 record_len
        u8  n_q,  u16[n_q]  question ids
        u8  program_flag (0 = hidden from training, 1 = supervised)
        u8  n_p,  u8[n_p]   program ids
        u8[9]   grid cell codes
        u8[2700] image, HWC, before standardization
        u8  answer (1 = yes)
        u8  split (0 train, 1 val_iid, 2 val_ood)
        u8  template id
        u16 question index

The program is always stored so every split can be scored for program
accuracy; the flag marks whether training may see it.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .. import lang
from .dataset import SPLIT_NAMES, Dataset, Question
from .scene import IMAGE_SIZE, Stats
from .templates import QUESTION_VOCAB

MAGIC = b"SYGT"
VERSION = 1
IMAGE_BYTES = IMAGE_SIZE * IMAGE_SIZE * 3


class FormatError(ValueError):
    pass


def _header(ds: Dataset) -> dict:
    return {
        "seed": ds.seed,
        "n_supervised": ds.n_supervised,
        "p_empty": ds.p_empty,
        "counts": ds.counts(),
        "question_vocab": list(QUESTION_VOCAB),
        "program_vocab": [t.surface for t in lang.vocabulary()],
        "stats": {"mean": list(ds.stats.mean), "std": list(ds.stats.std)},
        "questions": [{"qid": q.qid, "template": q.template, "tokens": q.tokens,
                       "program": q.program, "one_sided": q.one_sided}
                      for q in ds.questions],
        "manifest": ds.manifest,
    }


def save_dataset(ds: Dataset, path: str | Path) -> None:
    header = json.dumps(_header(ds), sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<HI", VERSION, len(header)) + header)
        for i in range(len(ds)):
            q = ds.questions[ds.qid[i]]
            body = bytearray()
            body += struct.pack("<B", len(q.tokens)) + struct.pack(f"<{len(q.tokens)}H", *q.tokens)
            body += struct.pack("<BB", int(ds.supervised[i]), len(q.program)) + bytes(q.program)
            body += ds.grids[i].tobytes()
            body += ds.images[i].tobytes()
            body += struct.pack("<BBBH", int(ds.answers[i]), int(ds.split[i]), q.template, q.qid)
            f.write(struct.pack("<I", len(body)) + bytes(body))


def load_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a dataset file")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 10
    header = json.loads(raw[off:off + hlen])
    off += hlen
    questions = [Question(q["qid"], q["template"], q["tokens"], q["program"], q["one_sided"])
                 for q in header["questions"]]
    qids, grids, images, answers, splits, sup = [], [], [], [], [], []
    while off < len(raw):
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        end = off + n
        (nq,) = struct.unpack_from("<B", raw, off)
        p = off + 1 + 2 * nq
        flag, npg = struct.unpack_from("<BB", raw, p)
        p += 2 + npg
        grids.append(np.frombuffer(raw, np.uint8, 9, p))
        p += 9
        images.append(np.frombuffer(raw, np.uint8, IMAGE_BYTES, p))
        p += IMAGE_BYTES
        ans, spl, _tid, qid = struct.unpack_from("<BBBH", raw, p)
        if p + 5 != end:
            raise FormatError("record length mismatch")
        qids.append(qid)
        answers.append(ans)
        splits.append(spl)
        sup.append(bool(flag))
        off = end
    return Dataset(
        seed=header["seed"],
        n_supervised=header["n_supervised"],
        questions=questions,
        qid=np.array(qids, dtype=np.int64),
        grids=np.stack(grids).copy(),
        images=np.stack(images).reshape(-1, IMAGE_SIZE, IMAGE_SIZE, 3).copy(),
        answers=np.array(answers, dtype=np.uint8),
        split=np.array(splits, dtype=np.uint8),
        supervised=np.array(sup, dtype=bool),
        stats=Stats(tuple(header["stats"]["mean"]), tuple(header["stats"]["std"])),
        p_empty=header["p_empty"],
        manifest=header["manifest"],
    )


def export_jsonl(ds: Dataset, path: str | Path) -> None:
    with open(path, "w") as f:
        for i in range(len(ds)):
            q = ds.questions[ds.qid[i]]
            rec = {
                "index": i,
                "question": " ".join(QUESTION_VOCAB[t] for t in q.tokens),
                "question_ids": q.tokens,
                "program": lang.to_text(q.program),
                "program_ids": q.program,
                "supervised": bool(ds.supervised[i]),
                "grid": ds.grids[i].tolist(),
                "image": ds.images[i].reshape(-1).tolist(),
                "answer": "yes" if ds.answers[i] else "no",
                "split": SPLIT_NAMES[ds.split[i]],
                "template": q.template,
                "qid": q.qid,
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")
