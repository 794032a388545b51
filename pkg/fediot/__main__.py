"""
__main__.py

Lets the package run as ``python -m fediot <command>``.

"""

from . import create_app

app = create_app()

if __name__ == "__main__":
    app(prog_name="fediot")
