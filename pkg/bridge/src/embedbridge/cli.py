"""Bridge command line: encode-images / encode-captions --manifest path."""

from __future__ import annotations

import sys

import click

from . import BridgeError
from .bridge import BridgeManifest, encode_captions, encode_images


def _load(manifest_path: str) -> BridgeManifest:
    try:
        return BridgeManifest.from_json(manifest_path)
    except FileNotFoundError:
        click.echo(f"error: manifest does not exist: {manifest_path}", err=True)
        sys.exit(2)


@click.group()
def main():
    """Encode images or concept captions into engine embedding files."""


@main.command("encode-images")
@click.option("--manifest", "manifest_path", required=True)
def encode_images_cmd(manifest_path):
    manifest = _load(manifest_path)
    try:
        output = encode_images(manifest)
    except BridgeError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    click.echo(f"wrote {output} (+ sidecar {output}.log.json)")


@main.command("encode-captions")
@click.option("--manifest", "manifest_path", required=True)
def encode_captions_cmd(manifest_path):
    manifest = _load(manifest_path)
    try:
        output = encode_captions(manifest)
    except BridgeError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    click.echo(f"wrote {output} (+ sidecar {output}.log.json)")


if __name__ == "__main__":
    main()
