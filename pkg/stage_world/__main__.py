"""Entrypoint for python -m stage_world."""

from stage_world.cli import main

if __name__ == "__main__":
    main()
