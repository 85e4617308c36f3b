from oscar_kv.cli import app

if __name__ == "__main__":
    app(prog_name="oscar-kv")
