import os

os.environ["PYTHONUTF8"] = "1"
