"""Echo payload for local end-to-end runs.

ps tasks serve a line echo on their advertised endpoint; workers look the
endpoint up in ORCH_CLUSTER_SPEC, send a line, expect it back and exit 0.

  --fail-once MARKER   worker/1 exits 1 if MARKER does not exist yet (and creates it)
"""

import json
import os
import socket
import socketserver
import sys
import time


class Echo(socketserver.StreamRequestHandler):
    def handle(self):
        for line in self.rfile:
            self.wfile.write(line)


class Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def serve(spec, index):
    host, port = spec["ps"][index].rsplit(":", 1)
    with Server(("0.0.0.0", int(port)), Echo) as srv:
        print(f"ps/{index} serving on {host}:{port}", flush=True)
        srv.serve_forever()


def work(spec, index):
    host, port = spec["ps"][0].rsplit(":", 1)
    deadline = time.time() + 5
    while True:
        try:
            conn = socket.create_connection((host, int(port)), timeout=2)
            break
        except OSError:
            if time.time() > deadline:
                raise
            time.sleep(0.05)
    msg = f"hello from worker/{index} attempt {os.environ['ORCH_ATTEMPT']}\n".encode()
    with conn:
        conn.sendall(msg)
        got = conn.makefile("rb").readline()
    if got != msg:
        print(f"bad echo {got!r}", flush=True)
        return 3
    print(f"worker/{index} got echo {got.decode().strip()!r}", flush=True)
    return 0


def main(argv):
    spec = json.loads(os.environ["ORCH_CLUSTER_SPEC"])
    kind = os.environ["ORCH_TASK_TYPE"]
    index = int(os.environ["ORCH_TASK_INDEX"])
    if "--fail-once" in argv:
        marker = argv[argv.index("--fail-once") + 1]
        if kind == "worker" and index == 1 and not os.path.exists(marker):
            open(marker, "w").close()
            print("failing once on purpose", flush=True)
            return 1
    if kind == "ps":
        serve(spec, index)
        return 0
    return work(spec, index)


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
