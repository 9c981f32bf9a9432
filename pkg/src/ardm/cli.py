"""Command-line entry points: corpus tools, training, generation,
evaluation, and the chat service.
"""

from __future__ import annotations

import json
import os
import sys

import click
import numpy as np

from .data import (EntityDB, delexicalize, load_corpus, records_to_dialogs,
                   role_unigram_entropy, save_corpus, synth_corpus)
from .decoder import (PRESETS, DecodeMemory, decode_eval_mode,
                      sample_utterance, self_play)
from .dialog_model import ArdmParams, load_bundle, save_bundle
from .metrics import build_report
from .model import ModelConfig
from .tokenizer import SYSTEM, USER, train_bpe
from .trainer import TrainConfig, train


@click.group()
def main():
    """Two-role dialog model toolkit."""


# -- data -------------------------------------------------------------------

@main.group()
def data():
    """Corpus generation and preprocessing."""


@data.command("synth")
@click.option("--n-dialogs", "-n", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--db-out", type=click.Path(), default=None,
              help="Also write the entity DB as JSON.")
def data_synth(n_dialogs, seed, out, db_out):
    """Generate a synthetic two-role booking corpus."""
    records, db = synth_corpus(n_dialogs, grammar_seed=seed)
    save_corpus(out, records)
    if db_out:
        db.save(db_out)
    click.echo(f"wrote {len(records)} dialogs to {out}")


@data.command("delex")
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--db", "db_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def data_delex(corpus, db_path, out):
    """Delexicalize every turn of a corpus against an entity DB."""
    db = EntityDB.load(db_path)
    records = load_corpus(corpus)
    for rec in records:
        rec.turns = [(role, delexicalize(text, db)[0], dbr)
                     for role, text, dbr in rec.turns]
    save_corpus(out, records)
    click.echo(f"delexicalized {len(records)} dialogs to {out}")


@data.command("stats")
@click.option("--corpus", required=True, type=click.Path(exists=True))
def data_stats(corpus):
    """Print corpus size and per-role statistics."""
    records = load_corpus(corpus)
    turns = sum(len(r.turns) for r in records)
    by_role = {USER: 0, SYSTEM: 0}
    for r in records:
        for role, text, _ in r.turns:
            by_role[role] += 1
    entropy = role_unigram_entropy(records)
    click.echo(json.dumps({
        "dialogs": len(records), "turns": turns,
        "user_turns": by_role[USER], "system_turns": by_role[SYSTEM],
        "unigram_entropy_nats": {k: round(v, 4) for k, v in entropy.items()},
    }, indent=2))


# -- init / train -----------------------------------------------------------

@main.command("init")
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="Model config JSON; defaults apply if omitted.")
@click.option("--vocab-size", default=512, show_default=True)
@click.option("--shared", is_flag=True,
              help="Single parameter set serving both roles (baseline).")
def init_cmd(corpus, out, config_path, vocab_size, shared):
    """Train a tokenizer on the corpus and write a random-init bundle."""
    records = load_corpus(corpus)
    text = "\n".join(t.text for r in records for t in r.to_dialog())
    vocab = train_bpe(text, vocab_size)
    if config_path:
        with open(config_path) as f:
            blob = json.load(f)
        blob["vocab_size"] = vocab.size
        config = ModelConfig(**blob)
    else:
        config = ModelConfig(vocab_size=vocab.size)
    params = ArdmParams.shared_lm(config) if shared \
        else ArdmParams.fresh(config)
    save_bundle(out, params, vocab)
    click.echo(f"initialized bundle at {out} (vocab {vocab.size})")


@main.command("train")
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True),
              help="Bundle to start from (see `init`).")
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="Training config JSON.")
@click.option("--out", required=True, type=click.Path())
@click.option("--val-fraction", default=0.1, show_default=True)
def train_cmd(corpus, checkpoint, config_path, out, val_fraction):
    """Fit the two role models on a JSONL corpus."""
    params, vocab = load_bundle(checkpoint)
    cfg = TrainConfig()
    if config_path:
        with open(config_path) as f:
            cfg = TrainConfig(**json.load(f))
    records = load_corpus(corpus)
    dialogs = records_to_dialogs(records)
    n_val = max(1, int(len(dialogs) * val_fraction))
    val, tr = dialogs[:n_val], dialogs[n_val:]
    os.makedirs(out, exist_ok=True)

    def log(record):
        click.echo(json.dumps(record))

    train(tr, params, vocab, cfg, val_corpus=val, out_dir=out, log=log)
    click.echo(f"trained bundle at {out}")


# -- generate ---------------------------------------------------------------

@main.command("generate")
@click.option("--mode", type=click.Choice(["eval", "interactive", "selfplay"]),
              required=True)
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--preset", default="default", show_default=True,
              type=click.Choice(sorted(PRESETS)))
@click.option("--corpus", type=click.Path(exists=True), default=None,
              help="Ground-truth dialogs (eval mode).")
@click.option("--n-dialogs", default=5, show_default=True,
              help="Dialogs to produce (selfplay mode).")
@click.option("--max-turns", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(), default=None,
              help="JSONL transcript output (defaults to stdout).")
def generate_cmd(mode, checkpoint, preset, corpus, n_dialogs, max_turns,
                 seed, out):
    """Decode with a trained bundle in one of three modes."""
    params, vocab = load_bundle(checkpoint)
    cfg = PRESETS[preset]
    lines = []
    if mode == "eval":
        if not corpus:
            raise click.UsageError("eval mode needs --corpus")
        records = load_corpus(corpus)
        for i, rec in enumerate(records):
            dialog = rec.to_dialog()
            outputs = decode_eval_mode(dialog, SYSTEM, params, vocab, cfg,
                                       global_seed=seed + i)
            lines.append(json.dumps({"id": rec.id, "generated": outputs}))
    elif mode == "selfplay":
        for i in range(n_dialogs):
            result = self_play(None, max_turns, params, vocab, cfg, cfg,
                               global_seed=seed + i)
            lines.append(json.dumps({
                "id": f"selfplay-{seed + i}",
                "turns": [[t.role, t.text, None] for t in result.dialog],
                "requested_slots": [], "goal": {},
            }))
    else:
        _interactive_loop(params, vocab, cfg, seed)
        return
    text = "\n".join(lines) + "\n"
    if out:
        with open(out, "w") as f:
            f.write(text)
        click.echo(f"wrote {len(lines)} transcripts to {out}")
    else:
        click.echo(text, nl=False)


def _interactive_loop(params, vocab, cfg, seed):
    from .decoder import job_rng
    click.echo("interactive mode; empty line quits")
    memory = DecodeMemory(params, vocab)
    rng = job_rng(seed, 0)
    while True:
        try:
            text = click.prompt("you", default="", show_default=False)
        except (EOFError, click.Abort):
            break
        if not text:
            break
        memory.feed_turn(USER, text)
        result = sample_utterance(SYSTEM, memory, cfg, rng)
        memory = result.memory
        click.echo(f"sys: {result.text}")


# -- eval -------------------------------------------------------------------

@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--db", "db_path", type=click.Path(exists=True), default=None)
@click.option("--preset", default="default", show_default=True,
              type=click.Choice(sorted(PRESETS)))
@click.option("--seed", default=0, show_default=True)
@click.option("--report", type=click.Path(), default=None)
@click.option("--skip-generation", is_flag=True,
              help="Perplexity only (no decoded responses, BLEU=0).")
def eval_cmd(checkpoint, corpus, db_path, preset, seed, report,
             skip_generation):
    """Score a bundle on a corpus and emit an evaluation report."""
    params, vocab = load_bundle(checkpoint)
    records = load_corpus(corpus)
    dialogs = records_to_dialogs(records)
    db = EntityDB.load(db_path) if db_path else None
    cfg = PRESETS[preset]
    generations = {}
    if not skip_generation:
        for i, dialog in enumerate(dialogs):
            generations[i] = decode_eval_mode(dialog, SYSTEM, params, vocab,
                                              cfg, global_seed=seed + i)
    rep = build_report(params, vocab, dialogs, generations, records=records,
                       db=db, config_echo={"checkpoint": checkpoint,
                                           "preset": preset, "seed": seed})
    if report:
        with open(report, "w") as f:
            f.write(rep.to_json())
        click.echo(f"report written to {report}")
    else:
        click.echo(rep.to_json())


# -- serve ------------------------------------------------------------------

@main.command("serve")
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None)
def serve_cmd(config_path):
    """Run the HTTP chat service."""
    from .service import main as service_main
    service_main(config_path)


if __name__ == "__main__":
    main()
