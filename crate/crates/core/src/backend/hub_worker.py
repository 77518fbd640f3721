# Line-delimited JSON worker driven by the elana hub backend.
# argv[1] is a model-hub identifier or a local model directory.
import json
import sys


def main():
    proto = sys.stdout
    sys.stdout = sys.stderr

    def send(obj):
        proto.write(json.dumps(obj) + "\n")
        proto.flush()

    try:
        import torch
        from transformers import AutoModelForCausalLM

        device = "cuda" if torch.cuda.is_available() else "cpu"
        model = AutoModelForCausalLM.from_pretrained(sys.argv[1], torch_dtype="auto")
        model = model.to(device).eval()
    except Exception as e:  # noqa: BLE001
        send({"ok": False, "error": f"{type(e).__name__}: {e}"})
        return

    if device == "cuda":
        sync = torch.cuda.synchronize
        names = [torch.cuda.get_device_name(i) for i in range(torch.cuda.device_count())]
    else:
        def sync():
            return None
        names = ["cpu"]

    send({
        "ok": True,
        "vocab_size": int(model.config.vocab_size),
        "devices": names,
        "supports_decode_graph": False,
        "model_id": getattr(model.config, "_name_or_path", sys.argv[1]),
    })

    past = None
    last = None
    for line in sys.stdin:
        req = json.loads(line)
        op = req.get("op")
        try:
            with torch.inference_mode():
                if op == "prefill":
                    ids = torch.tensor(req["tokens"], dtype=torch.long, device=device)
                    out = model(input_ids=ids, use_cache=True)
                    past = out.past_key_values
                    last = out.logits[:, -1, :].argmax(dim=-1)
                    sync()
                    send({"ok": True, "tokens": last.tolist()})
                elif op == "decode":
                    if last is None:
                        raise RuntimeError("decode before prefill")
                    out = model(input_ids=last[:, None], past_key_values=past, use_cache=True)
                    past = out.past_key_values
                    last = out.logits[:, -1, :].argmax(dim=-1)
                    send({"ok": True, "tokens": last.tolist()})
                elif op == "sync":
                    sync()
                    send({"ok": True})
                elif op == "inventory":
                    entries = [
                        {"name": n, "element_count": p.numel(), "dtype_bytes": p.element_size(), "is_buffer": False}
                        for n, p in model.named_parameters()
                    ]
                    entries += [
                        {"name": n, "element_count": b.numel(), "dtype_bytes": b.element_size(), "is_buffer": True}
                        for n, b in model.named_buffers()
                    ]
                    send({"ok": True, "entries": entries})
                elif op == "shutdown":
                    send({"ok": True})
                    return
                else:
                    send({"ok": False, "error": f"unknown op {op!r}"})
        except Exception as e:  # noqa: BLE001
            send({"ok": False, "error": f"{type(e).__name__}: {e}"})


if __name__ == "__main__":
    main()
