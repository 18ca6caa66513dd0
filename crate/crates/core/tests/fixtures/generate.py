"""Regenerates the committed test fixtures.

Needs `pyaxml` (XML -> AXML encoder), `androguard` (reference AXML decoder)
and `lxml`. Run from this directory:

    python generate.py

Outputs:
  axml/*.axml            binary manifests
  axml/*.triples.tsv     (element, attribute, value) from androguard
  apk/*.apk              ZIP containers built with Python's zipfile
  apk/*.listing.tsv      entry table as reported by zipfile
  clean/*                cleaning input and expected output
  clients/               offline repository / scanner fixtures
"""

import hashlib
import json
import struct
import zipfile
from pathlib import Path

from loguru import logger
from lxml import etree

import pyaxml
from androguard.core.axml import AXMLParser, AXMLPrinter

logger.remove()

HERE = Path(__file__).resolve().parent
ANDROID_NS = "http://schemas.android.com/apk/res/android"

MANIFESTS = {
    "simple": """<manifest xmlns:android="http://schemas.android.com/apk/res/android"
    package="com.example.simple" android:versionCode="12" android:versionName="1.2">
  <uses-sdk android:minSdkVersion="21" android:targetSdkVersion="33"/>
  <uses-permission android:name="android.permission.INTERNET"/>
  <uses-permission android:name="android.permission.ACCESS_NETWORK_STATE"/>
  <application android:label="Simple" android:allowBackup="false" android:debuggable="true">
    <activity android:name=".MainActivity" android:exported="true">
      <intent-filter>
        <action android:name="android.intent.action.MAIN"/>
        <category android:name="android.intent.category.LAUNCHER"/>
      </intent-filter>
    </activity>
  </application>
</manifest>""",
    "sms_sender": """<manifest xmlns:android="http://schemas.android.com/apk/res/android"
    package="org.free.sms2" android:versionCode="7" android:versionName="2.0.1">
  <uses-permission android:name="android.permission.SEND_SMS"/>
  <uses-permission android:name="android.permission.RECEIVE_SMS"/>
  <uses-permission android:name="android.permission.READ_PHONE_STATE"/>
  <uses-permission android:name="android.permission.RECEIVE_BOOT_COMPLETED"/>
  <application android:label="FreeSMS" android:persistent="true">
    <receiver android:name=".BootReceiver" android:enabled="true">
      <intent-filter android:priority="1000">
        <action android:name="android.intent.action.BOOT_COMPLETED"/>
        <action android:name="android.provider.Telephony.SMS_RECEIVED"/>
      </intent-filter>
    </receiver>
    <service android:name=".SenderService" android:exported="false"/>
  </application>
</manifest>""",
}


def qualified(key, nsmap_inv):
    if key.startswith("{"):
        uri, local = key[1:].split("}", 1)
        prefix = nsmap_inv.get(uri, "android" if uri == ANDROID_NS else "")
        return f"{prefix}:{local}" if prefix else local
    return key


def reference_triples(raw):
    """(element, attribute, value) in document order via androguard."""
    root = AXMLPrinter(raw).get_xml_obj()
    out = []
    for el in root.iter():
        if not isinstance(el.tag, str):
            continue
        inv = {v: k for k, v in el.nsmap.items() if k}
        for k, v in el.attrib.items():
            out.append((el.tag, qualified(k, inv), v))
    return out


def write_triples(path, triples):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for t in triples:
            f.write("\t".join(t) + "\n")


# Hand-rolled AXML writer for features pyaxml does not emit: a UTF-8 string
# pool, reference / hex / colour / dimension values, 0xFFFFFFFF booleans,
# a nonstandard chunk and CDATA text.

RES_STRING_POOL = 0x0001
RES_XML = 0x0003
START_NS, END_NS, START_EL, END_EL, CDATA = 0x0100, 0x0101, 0x0102, 0x0103, 0x0104
RES_MAP = 0x0180
NO_INDEX = 0xFFFFFFFF

ATTR_IDS = {
    "name": 0x01010003,
    "label": 0x01010001,
    "icon": 0x01010002,
    "theme": 0x01010000,
    "debuggable": 0x0101000F,
    "versionCode": 0x0101021B,
    "configChanges": 0x0101001F,
    "textColor": 0x01010098,
    "layout_width": 0x010100F4,
    "windowSoftInputMode": 0x0101022B,
}


class Writer:
    def __init__(self):
        self.strings = []
        self.nodes = b""

    def idx(self, s):
        if s not in self.strings:
            self.strings.append(s)
        return self.strings.index(s)

    def node(self, ty, body, line=1):
        self.nodes += struct.pack("<HHIII", ty, 16, 16 + len(body), line, NO_INDEX) + body

    def start_ns(self, prefix, uri):
        self.node(START_NS, struct.pack("<II", self.idx(prefix), self.idx(uri)))

    def end_ns(self, prefix, uri):
        self.node(END_NS, struct.pack("<II", self.idx(prefix), self.idx(uri)))

    def start(self, name, attrs):
        body = struct.pack("<IIHHHHHH", NO_INDEX, self.idx(name), 20, 20, len(attrs), 0, 0, 0)
        for ns, an, ty, val in attrs:
            ns_i = self.idx(ns) if ns else NO_INDEX
            an_i = self.idx(an)
            if ty == 0x03:
                raw = data = self.idx(val)
            else:
                raw, data = NO_INDEX, val & 0xFFFFFFFF
            body += struct.pack("<IIIHBBI", ns_i, an_i, raw, 8, 0, ty, data)
        self.node(START_EL, body)

    def end(self, name):
        self.node(END_EL, struct.pack("<II", NO_INDEX, self.idx(name)))

    def cdata(self, text):
        i = self.idx(text)
        self.node(CDATA, struct.pack("<IHBBI", i, 8, 0, 0x03, i))

    def raw_chunk(self, ty, payload):
        self.nodes += struct.pack("<HHI", ty, 8, 8 + len(payload)) + payload

    def finish(self):
        # attribute names with resource ids must come first in the pool
        named = [n for n in ATTR_IDS if n in self.strings]
        rest = [s for s in self.strings if s not in named]
        order = named + rest
        remap = {self.strings.index(s): order.index(s) for s in self.strings}
        nodes = remap_nodes(self.nodes, remap)

        offsets, data = b"", b""
        for s in order:
            offsets += struct.pack("<I", len(data))
            enc = s.encode("utf-8")
            data += enc_len8(len(s)) + enc_len8(len(enc)) + enc + b"\x00"
        while len(data) % 4:
            data += b"\x00"
        strings_start = 28 + len(offsets)
        pool = struct.pack(
            "<HHIIIIII",
            RES_STRING_POOL, 28, strings_start + len(data),
            len(order), 0, 1 << 8, strings_start, 0,
        ) + offsets + data
        ids = b"".join(struct.pack("<I", ATTR_IDS[n]) for n in named)
        resmap = struct.pack("<HHI", RES_MAP, 8, 8 + len(ids)) + ids
        body = pool + resmap + nodes
        return struct.pack("<HHI", RES_XML, 8, 8 + len(body)) + body


def enc_len8(n):
    return bytes([n]) if n < 0x80 else bytes([0x80 | (n >> 8), n & 0xFF])


def remap_nodes(nodes, remap):
    """Rewrites string indices in already-serialised node chunks."""
    out = bytearray(nodes)
    pos = 0

    def fix(at):
        (v,) = struct.unpack_from("<I", out, at)
        if v != NO_INDEX:
            struct.pack_into("<I", out, at, remap[v])

    while pos < len(out):
        ty, hs, size = struct.unpack_from("<HHI", out, pos)
        body = pos + hs
        if ty in (START_NS, END_NS, END_EL):
            fix(body)
            fix(body + 4)
        elif ty == CDATA:
            fix(body)
            fix(body + 8)
        elif ty == START_EL:
            fix(body)
            fix(body + 4)
            (count,) = struct.unpack_from("<H", out, body + 12)
            for i in range(count):
                a = body + 20 + 20 * i
                fix(a)
                fix(a + 4)
                fix(a + 8)
                if out[a + 15] == 0x03:
                    fix(a + 16)
        pos += size
    return bytes(out)


def handmade():
    w = Writer()
    A = ANDROID_NS
    w.start_ns("android", A)
    w.start("manifest", [("", "package", 0x03, "com.example.typed"),
                         (A, "versionCode", 0x10, 42)])
    w.start("uses-permission", [(A, "name", 0x03, "android.permission.CAMERA")])
    w.end("uses-permission")
    w.raw_chunk(0x0777, b"\xde\xad\xbe\xef")
    w.start("application", [
        (A, "label", 0x01, 0x7F0A0001),
        (A, "icon", 0x01, 0x7F020000),
        (A, "theme", 0x01, 0x01030006),
        (A, "debuggable", 0x12, 0xFFFFFFFF),
    ])
    w.start("activity", [
        (A, "name", 0x03, "com.example.typed.Main"),
        (A, "configChanges", 0x11, 0x000004A0),
        (A, "textColor", 0x1C, 0xFF00FF00),
        (A, "layout_width", 0x05, (24 << 8) | 1),
        (A, "windowSoftInputMode", 0x10, -1),
    ])
    w.start("meta-data", [(A, "name", 0x03, "kéy.ünicode")])
    w.cdata("inline text")
    w.end("meta-data")
    w.end("activity")
    w.end("application")
    w.end("manifest")
    w.end_ns("android", A)
    return w.finish()


def build_axml():
    out = HERE / "axml"
    out.mkdir(exist_ok=True)
    produced = {}
    for name, xml in MANIFESTS.items():
        a = pyaxml.AXML()
        a.from_xml(etree.fromstring(xml.encode()))
        a.compute()
        raw = a.pack()
        (out / f"{name}.axml").write_bytes(raw)
        (out / f"{name}.xml").write_text(xml + "\n", encoding="utf-8")
        write_triples(out / f"{name}.triples.tsv", reference_triples(raw))
        produced[name] = raw
    raw = handmade()
    (out / "typed_utf8.axml").write_bytes(raw)
    write_triples(out / "typed_utf8.triples.tsv", reference_triples(raw))
    produced["typed_utf8"] = raw
    # sanity: androguard sees the value types we meant to write
    p = AXMLParser(raw)
    assert p.is_valid()
    return produced


def write_listing(path, apk):
    with zipfile.ZipFile(apk) as z, open(path, "w", newline="\n") as f:
        for info in z.infolist():
            f.write(f"{info.filename}\t{info.compress_type}\t{info.compress_size}\t"
                    f"{info.file_size}\t{info.CRC:08x}\n")


def build_apks(manifests):
    out = HERE / "apk"
    out.mkdir(exist_ok=True)
    payload = manifests["simple"]
    filler = b"classes.dex placeholder\n" * 40
    specs = {
        "stored": zipfile.ZIP_STORED,
        "deflated": zipfile.ZIP_DEFLATED,
    }
    for name, method in specs.items():
        apk = out / f"{name}.apk"
        with zipfile.ZipFile(apk, "w") as z:
            z.writestr(zipfile.ZipInfo("META-INF/MANIFEST.MF", (2020, 1, 1, 0, 0, 0)),
                       b"Manifest-Version: 1.0\n", compress_type=method)
            z.writestr(zipfile.ZipInfo("AndroidManifest.xml", (2020, 1, 1, 0, 0, 0)),
                       payload, compress_type=method)
            z.writestr(zipfile.ZipInfo("classes.dex", (2020, 1, 1, 0, 0, 0)),
                       filler, compress_type=zipfile.ZIP_DEFLATED)
        write_listing(out / f"{name}.listing.tsv", apk)
    apk = out / "no_manifest.apk"
    with zipfile.ZipFile(apk, "w") as z:
        z.writestr(zipfile.ZipInfo("res/AndroidManifest.xml", (2020, 1, 1, 0, 0, 0)), payload)
    write_listing(out / "no_manifest.listing.tsv", apk)
    (out / "manifest_payload.bin").write_bytes(payload)


# Cleaning rules, written independently of the Rust implementation.
def clean(text, lexicon):
    spaced = "".join(c if c.isalnum() else " " for c in text)
    return " ".join(t for t in spaced.split() if t not in lexicon)


def load_lexicon():
    path = HERE.parent.parent / "data" / "default_lexicon.txt"
    terms = set()
    for line in path.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            terms.add(line)
    return terms


def build_clean():
    out = HERE / "clean"
    out.mkdir(exist_ok=True)
    src = (HERE / "axml" / "sms_sender.xml").read_text(encoding="utf-8")
    raw = '<?xml version="1.0" encoding="utf-8"?>\n' + src
    (out / "sms_sender.in.xml").write_text(raw, encoding="utf-8")
    (out / "sms_sender.golden.txt").write_text(clean(raw, load_lexicon()) + "\n", encoding="utf-8")


def sha(b):
    return hashlib.sha256(b).hexdigest()


def build_clients(manifests):
    out = HERE / "clients"
    (out / "apks").mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(exist_ok=True)
    samples = []
    for i, (name, fam) in enumerate([
        ("simple", None),
        ("sms_sender", "Trojan.SMSSend.abc"),
        ("typed_utf8", "trojan.banker.xyz"),
        ("simple", "weirdfam"),
    ]):
        buf = out / "apks" / "tmp.apk"
        with zipfile.ZipFile(buf, "w") as z:
            z.writestr(zipfile.ZipInfo("AndroidManifest.xml", (2021, 3, 1 + i, 0, 0, 0)),
                       manifests[name], compress_type=zipfile.ZIP_DEFLATED)
            z.writestr(zipfile.ZipInfo("assets/id.txt", (2021, 3, 1 + i, 0, 0, 0)), str(i))
        data = buf.read_bytes()
        buf.unlink()
        h = sha(data)
        fname = f"sample{i}.apk"
        (out / "apks" / fname).write_bytes(data)
        verdict = "benign" if fam is None else "malware"
        report = {"sha256": h, "positives": 0 if fam is None else 7,
                  "families": [] if fam is None else [fam]}
        (out / "reports" / f"{h}.json").write_text(json.dumps(report, indent=2) + "\n")
        samples.append((h, verdict, fname, f"2021-03-0{1 + i}"))
    with open(out / "index.csv", "w", newline="\n") as f:
        f.write("hash,verdict,category,filename,date\n")
        for h, verdict, fname, date in samples:
            f.write(f"{h},{verdict},,{fname},{date}\n")


def main():
    manifests = build_axml()
    build_apks(manifests)
    build_clean()
    build_clients(manifests)


if __name__ == "__main__":
    main()
