"""Module entry point: python -m sketchgen <command> ..."""

from sketchgen.cli import main

if __name__ == "__main__":
    raise SystemExit(main())
