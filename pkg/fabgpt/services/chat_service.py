import sys
from typing import Optional, TextIO, Tuple

import numpy as np

from fabgpt.core.errors import FabError, InputError
from fabgpt.models.pipeline import FabPipeline
from fabgpt.repositories.dataset_repo import find_meta_for_image, read_png
from fabgpt.services import run_service
from fabgpt.services.eval_service import ask

PROMPT = "> "


class ChatSession:
    """
    Line protocol: a plain line is a question, `/image <path>` attaches a
    wafer image, `/image` alone detaches it, `/quit` ends the session.
    """

    def __init__(self, pipeline: FabPipeline, run_id: Optional[str] = None,
                 out: Optional[TextIO] = None, err: Optional[TextIO] = None):
        self.pipeline = pipeline
        self.run_id = run_id
        self.out = out or sys.stdout
        self.err = err or sys.stderr
        self.image: Optional[np.ndarray] = None
        self.text_marks = ""

    def load_image(self, path: str) -> None:
        image = read_png(path)
        size = self.pipeline.image_size
        if image.shape != (size, size):
            raise InputError(f"image is {image.shape[0]}x{image.shape[1]}, checkpoint expects {size}x{size}")
        meta = find_meta_for_image(path)
        self.image = image
        self.text_marks = meta.text_marks if meta else ""

    def ask(self, question: str) -> Tuple[str, float]:
        text, a = ask(self.pipeline, question, self.image, self.text_marks)
        if self.run_id:
            run_service.append_log(self.run_id, f"gate a={a:.4f} question={question!r}")
        return text, a

    def handle(self, line: str) -> bool:
        """Process one input line; False ends the session."""
        line = line.strip()
        if not line:
            return True
        if line == "/quit":
            return False
        if line.startswith("/image"):
            path = line[len("/image"):].strip()
            if not path:
                self.image, self.text_marks = None, ""
                print("image cleared", file=self.out)
                return True
            try:
                self.load_image(path)
                print(f"loaded {path}", file=self.out)
            except FabError as e:
                print(f"error: {e.detail}", file=self.err)
            return True
        text, a = self.ask(line)
        print(text, file=self.out)
        print(f"[a={a:.3f}]", file=self.err)
        return True

    def repl(self, stdin: Optional[TextIO] = None, interactive: bool = False) -> int:
        stdin = stdin or sys.stdin
        while True:
            if interactive:
                print(PROMPT, end="", file=self.out, flush=True)
            line = stdin.readline()
            if not line:
                return 0
            if not self.handle(line):
                return 0
