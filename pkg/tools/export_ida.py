"""Export every function as JSONL for the analysis toolkit.

Run inside IDA Pro with the Hex-Rays decompiler loaded:

    idat64 -A -S"export_ida.py out.jsonl" binary

Each line is one object: project, binary, name, address, pseudocode,
external.  Functions that fail to decompile are emitted with empty
pseudocode and external=true so call-graph edges to them survive.
"""
import json
import sys

import ida_auto
import ida_hexrays
import ida_nalt
import ida_pro
import idautils
import idc

ida_auto.auto_wait()
out_path = idc.ARGV[1] if len(idc.ARGV) > 1 else "dump.jsonl"
binary = ida_nalt.get_root_filename()
with open(out_path, "w", encoding="utf-8") as out:
    for ea in idautils.Functions():
        name = idc.get_func_name(ea)
        try:
            text = str(ida_hexrays.decompile(ea))
        except ida_hexrays.DecompilationFailure:
            text = ""
        row = {"project": binary, "binary": binary, "name": name,
               "address": ea, "pseudocode": text, "external": not text}
        out.write(json.dumps(row, ensure_ascii=False) + "\n")
ida_pro.qexit(0)
