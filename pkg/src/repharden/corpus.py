"""Synthetic report corpus with planted brittle and robust class signals.

Each class plants two kinds of evidence: marker API names in resolved_apis
(robust — the attacker can dilute but never remove them) and a small pool of
distinctive mutex/file names (brittle — one rename makes them vanish). The
point of the generator is that a naively trained model shortcuts onto the
brittle names, which is exactly what the attack loop is supposed to expose.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import IoError, ParseError, SchemaError, SpecError, SplitError
from .reports import CATEGORIES, Report, parse_report, serialize_report

# ---------------------------------------------------------------------------
# shared background vocabulary (class-neutral noise floor)

_SYSTEM_DIRS = [
    "C:\\Windows\\System32",
    "C:\\Windows\\SysWOW64",
    "C:\\Windows",
    "C:\\Windows\\Temp",
    "C:\\Program Files\\Common Files",
    "C:\\Program Files (x86)\\Common Files",
    "C:\\Users\\admin\\AppData\\Local\\Temp",
    "C:\\Users\\admin\\AppData\\Roaming",
    "C:\\Users\\admin\\Documents",
    "C:\\ProgramData",
    "C:\\Users\\Public",
    "C:\\Windows\\Fonts",
]

_FILE_NAMES = (
    [
        "kernel32.dll", "user32.dll", "ntdll.dll", "advapi32.dll", "shell32.dll",
        "ole32.dll", "msvcrt.dll", "ws2_32.dll", "gdi32.dll", "comctl32.dll",
        "wininet.dll", "crypt32.dll", "rpcrt4.dll", "sechost.dll", "shlwapi.dll",
        "setup.log", "install.log", "config.ini", "settings.dat", "cache.db",
        "update.exe", "helper.exe", "runtime.dll", "loader.exe", "readme.txt",
    ]
    + [f"mod{n:02d}.dll" for n in range(10)]
    + [f"data{n:02d}.bin" for n in range(5)]
)

_COMMON_FILES = [f"{d}\\{n}" for d in _SYSTEM_DIRS for n in _FILE_NAMES]

_REG_ROOTS = [
    "HKEY_LOCAL_MACHINE\\SOFTWARE\\Microsoft\\Windows\\CurrentVersion",
    "HKEY_LOCAL_MACHINE\\SOFTWARE\\Microsoft\\Windows NT\\CurrentVersion",
    "HKEY_LOCAL_MACHINE\\SYSTEM\\CurrentControlSet\\Services",
    "HKEY_LOCAL_MACHINE\\SOFTWARE\\Classes",
    "HKEY_CURRENT_USER\\Software\\Microsoft\\Windows\\CurrentVersion",
    "HKEY_CURRENT_USER\\Software\\Classes",
]

_REG_TAILS = (
    [
        "Run", "RunOnce", "Explorer\\Advanced", "Internet Settings", "Policies\\System",
        "Uninstall", "App Paths", "Shell Folders", "Winlogon", "Fonts",
        "Themes", "Control Panel", "Session Manager", "Environment", "Network",
    ]
    + [f"Component{n:02d}" for n in range(20)]
    + [f"Interface\\{{{n:08d}-0000-0000-C000-000000000046}}" for n in range(15)]
)

_COMMON_KEYS = [f"{r}\\{t}" for r in _REG_ROOTS for t in _REG_TAILS]

_COMMON_APIS = [
    "LoadLibraryA", "LoadLibraryW", "GetProcAddress", "GetModuleHandleW", "CreateFileW",
    "ReadFile", "WriteFile", "CloseHandle", "DeleteFileW", "CreateFileMappingW",
    "MapViewOfFile", "VirtualAlloc", "VirtualProtect", "HeapAlloc", "HeapFree",
    "RegOpenKeyExW", "RegQueryValueExW", "RegCloseKey", "RegEnumKeyExW", "RegSetValueExW",
    "CreateThread", "WaitForSingleObject", "Sleep", "GetTickCount", "QueryPerformanceCounter",
    "GetSystemTimeAsFileTime", "GetCurrentProcess", "GetCurrentThreadId", "ExitProcess", "TerminateProcess",
    "MultiByteToWideChar", "WideCharToMultiByte", "lstrlenW", "lstrcmpiW", "GetTempPathW",
    "FindFirstFileW", "FindNextFileW", "FindClose", "GetFileAttributesW", "SetFilePointer",
    "GetVersionExW", "GetSystemInfo", "GetComputerNameW", "GetUserNameW", "OpenProcess",
    "CoInitializeEx", "CoCreateInstance", "CoUninitialize", "SysAllocString", "SysFreeString",
    "InitializeCriticalSection", "EnterCriticalSection", "LeaveCriticalSection", "TlsGetValue", "TlsSetValue",
    "GetLastError", "SetLastError", "FormatMessageW", "LocalAlloc", "LocalFree",
] + [f"ordinal_{n}" for n in range(1, 181)]

_COMMON_MUTEXES = [
    "Local\\SM0:1234:120:WilError_03", "Global\\CLR_PerfMon_Mutex", "Local\\ZonesCacheCounterMutex",
    "Local\\ZonesLockedCacheCounterMutex", "Global\\WindowsUpdateTracingMutex", "Local\\MSCTF.Asm.Mutex",
    "Global\\CrashReporterLock", "Local\\RSS Eventing Mutex", "Global\\net_cache_sync",
    "Local\\c2r_instance_mutex", "Global\\TelemetrySessionGuard", "Local\\DDrawDriverObjectListMutex",
    "Global\\svc_heartbeat", "Local\\profiler_session", "Global\\shared_page_pool",
    "Local\\font_cache_lock", "Global\\dns_resolver_mutex", "Local\\wmi_provider_lock",
]

_COMMON_COMMANDS = [
    "C:\\Windows\\System32\\svchost.exe -k netsvcs",
    "C:\\Windows\\System32\\wbem\\wmiprvse.exe",
    "C:\\Windows\\System32\\conhost.exe 0x4",
    "C:\\Windows\\System32\\sc.exe query winmgmt",
    "C:\\Windows\\System32\\reg.exe query HKLM\\SOFTWARE",
    "C:\\Windows\\System32\\tasklist.exe /v",
    "C:\\Windows\\System32\\ipconfig.exe /all",
    "C:\\Windows\\System32\\net.exe session",
    "C:\\Windows\\System32\\whoami.exe /priv",
    "C:\\Windows\\explorer.exe",
]

_SERVICE_NAMES = [
    "EventLog", "Schedule", "Themes", "AudioSrv", "Dhcp", "Dnscache", "LanmanServer",
    "LanmanWorkstation", "PlugPlay", "SamSs", "ShellHWDetection", "Spooler", "W32Time",
    "WinDefend", "wuauserv", "BITS", "CryptSvc", "TrustedInstaller", "UsoSvc", "WSearch",
]

_ECHO_TEMPLATES = [
    '"{p}"',
    '"{p}" /silent',
    '"{p}" -install',
    'cmd /c start "" "{p}"',
    'C:\\Windows\\System32\\rundll32.exe {p},DllMain',
]

# ---------------------------------------------------------------------------
# spec types

# entry-count ranges at full scale; means sum to roughly 1K entries per report
_BASE_RANGES: dict[str, tuple[int, int]] = {
    "files": (280, 400),
    "read_files": (60, 110),
    "write_files": (25, 60),
    "delete_files": (4, 14),
    "keys": (150, 230),
    "read_keys": (30, 70),
    "write_keys": (12, 30),
    "delete_keys": (0, 6),
    "executed_commands": (20, 50),
    "resolved_apis": (140, 220),
    "mutexes": (2, 6),
    "created_services": (0, 4),
    "started_services": (0, 5),
}


@dataclass
class ClassProfile:
    """Generative recipe for one class."""

    core_apis: list[str]  # robust markers, land in resolved_apis
    spurious_mutexes: list[str]  # brittle markers, one per report
    spurious_files: list[str]  # brittle markers, one per report
    entry_ranges: dict[str, tuple[int, int]] = field(default_factory=lambda: dict(_BASE_RANGES))
    noise_rate: float = 0.1
    marker_range: tuple[int, int] = (1, 3)  # core apis planted per report, inclusive


@dataclass
class CorpusSpec:
    classes: list[tuple[str, float]]
    profiles: dict[str, ClassProfile]
    size: int = 2000
    entry_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if not self.classes:
            raise SpecError("spec needs at least one class")
        if self.size < 0:
            raise SpecError("size must be non-negative")
        if self.entry_scale <= 0:
            raise SpecError("entry_scale must be positive")
        names = [c for c, _ in self.classes]
        if len(set(names)) != len(names):
            raise SpecError("duplicate class names")
        for name, weight in self.classes:
            if weight <= 0:
                raise SpecError(f"class {name!r} has non-positive weight")
            if name not in self.profiles:
                raise SpecError(f"class {name!r} has no profile")
            missing = set(CATEGORIES) - set(self.profiles[name].entry_ranges)
            if missing:
                raise SpecError(f"profile {name!r} missing ranges for {sorted(missing)}")
        seen: set[str] = set()
        for name in names:
            prof = self.profiles[name]
            pool = set(prof.spurious_mutexes) | set(prof.spurious_files)
            if pool & seen:
                raise SpecError(f"spurious pool of {name!r} overlaps another class")
            seen |= pool

    def spurious_entries(self) -> set[str]:
        out: set[str] = set()
        for prof in self.profiles.values():
            out |= set(prof.spurious_mutexes) | set(prof.spurious_files)
        return out


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]
    ratios: tuple[float, float, float]

    def select(self, corpus: list[Report], which: str) -> list[Report]:
        ids = set(getattr(self, which))
        return [r for r in corpus if r.sample_id in ids]


# ---------------------------------------------------------------------------
# presets


def binary_spec(size: int = 2000, entry_scale: float = 1.0, seed: int = 0) -> CorpusSpec:
    """benign/malware at a 33/67 mix."""
    benign = ClassProfile(
        core_apis=[
            "CreateWindowExW", "ShowWindow", "UpdateWindow", "GetMessageW", "DispatchMessageW",
            "TranslateMessage", "BeginPaint", "EndPaint", "GetClientRect", "InvalidateRect",
        ],
        spurious_mutexes=[f"Local\\app_update_gate_{n:02d}" for n in range(10)],
        spurious_files=[f"C:\\Program Files\\App\\plugins\\ui_pack_{n:02d}.dll" for n in range(10)],
    )
    malware = ClassProfile(
        core_apis=[
            "CryptEncrypt", "CryptGenKey", "CryptAcquireContextW", "WriteProcessMemory",
            "CreateRemoteThread", "SetWindowsHookExW", "AdjustTokenPrivileges",
            "IsDebuggerPresent", "InternetOpenUrlW", "HttpSendRequestW",
        ],
        spurious_mutexes=[f"Global\\xk7_sync_{n:04x}" for n in range(10)],
        spurious_files=[f"C:\\Users\\admin\\AppData\\Roaming\\syshlpr{n:02d}.exe" for n in range(10)],
    )
    return CorpusSpec(
        classes=[("benign", 1 / 3), ("malware", 2 / 3)],
        profiles={"benign": benign, "malware": malware},
        size=size,
        entry_scale=entry_scale,
        seed=seed,
    )


def multiclass_spec(size: int = 2000, entry_scale: float = 1.0, seed: int = 0) -> CorpusSpec:
    """benign plus three behavior families.

    The families carry more markers per report than the binary preset: with
    four classes an attacker only has to push the argmax into a neighboring
    family, so the unremovable evidence needs enough mass to anchor each one.
    """
    benign = binary_spec().profiles["benign"]
    ransom = ClassProfile(
        core_apis=[
            "CryptEncrypt", "CryptGenKey", "CryptExportKey", "CryptSetKeyParam",
            "CryptAcquireContextW", "GetLogicalDrives", "SetFileAttributesW", "MoveFileExW",
        ],
        spurious_mutexes=[f"Global\\lkx_room_{n:04x}" for n in range(10)],
        spurious_files=[f"C:\\Users\\admin\\Documents\\HOW_TO_RESTORE_{n:02d}.txt" for n in range(10)],
        marker_range=(2, 4),
    )
    worm = ClassProfile(
        core_apis=[
            "WNetEnumResourceW", "WNetAddConnection2W", "NetShareEnum", "NetUserEnum",
            "GetAdaptersInfo", "InternetGetConnectedState", "DsGetDcNameW", "GetIpNetTable",
        ],
        spurious_mutexes=[f"Global\\wrm_hop_{n:04x}" for n in range(10)],
        spurious_files=[f"C:\\Users\\Public\\autorun_{n:02d}.inf" for n in range(10)],
        marker_range=(2, 4),
    )
    spy = ClassProfile(
        core_apis=[
            "GetAsyncKeyState", "GetForegroundWindow", "GetWindowTextW", "GetClipboardData",
            "SetWindowsHookExW", "BitBlt", "GetDC", "RegisterRawInputDevices",
        ],
        spurious_mutexes=[f"Global\\kbd_tap_{n:04x}" for n in range(10)],
        spurious_files=[f"C:\\Users\\admin\\AppData\\Local\\Temp\\klg_{n:02d}.dat" for n in range(10)],
        marker_range=(2, 4),
    )
    return CorpusSpec(
        classes=[("benign", 0.4), ("ransom", 0.2), ("worm", 0.2), ("spy", 0.2)],
        profiles={"benign": benign, "ransom": ransom, "worm": worm, "spy": spy},
        size=size,
        entry_scale=entry_scale,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# generation

_ALNUM = np.array(list("abcdefghijklmnopqrstuvwxyz0123456789"))


def _junk(rng: np.random.Generator) -> str:
    n = int(rng.integers(6, 13))
    return "".join(rng.choice(_ALNUM, size=n))


def _scaled(rng: np.random.Generator, lo_hi: tuple[int, int], scale: float) -> int:
    lo = round(lo_hi[0] * scale)
    hi = max(lo, round(lo_hi[1] * scale))
    return int(rng.integers(lo, hi + 1))


def _draw(rng: np.random.Generator, pool: list[str], k: int) -> list[str]:
    if k <= 0:
        return []
    replace = k > len(pool)
    return [pool[i] for i in rng.choice(len(pool), size=k, replace=replace)]


def _subset(rng: np.random.Generator, parent: list[str], k: int) -> list[str]:
    k = min(k, len(parent))
    if k <= 0:
        return []
    return [parent[i] for i in rng.choice(len(parent), size=k, replace=False)]


def _gen_report(rng: np.random.Generator, sample_id: str, label: str, prof: ClassProfile, scale: float) -> Report:
    counts = {cat: _scaled(rng, prof.entry_ranges[cat], scale) for cat in CATEGORIES}
    noise = prof.noise_rate

    files = _draw(rng, _COMMON_FILES, max(counts["files"] - 1, 0))
    files.append(prof.spurious_files[rng.integers(len(prof.spurious_files))])
    for _ in range(rng.binomial(len(files), noise)):
        files.append(f"C:\\Users\\admin\\AppData\\Local\\Temp\\{_junk(rng)}.tmp")
    rng.shuffle(files)

    keys = _draw(rng, _COMMON_KEYS, counts["keys"])
    for _ in range(rng.binomial(max(len(keys), 1), noise)):
        keys.append(f"HKEY_CURRENT_USER\\Software\\{_junk(rng)}")
    rng.shuffle(keys)

    n_markers = int(rng.integers(prof.marker_range[0], prof.marker_range[1] + 1))
    apis = _draw(rng, _COMMON_APIS, counts["resolved_apis"]) + _subset(rng, prof.core_apis, max(n_markers, 1))
    rng.shuffle(apis)

    mutexes = [prof.spurious_mutexes[rng.integers(len(prof.spurious_mutexes))]]
    mutexes += _draw(rng, _COMMON_MUTEXES, max(counts["mutexes"] - 1, 0))
    rng.shuffle(mutexes)

    commands = _draw(rng, _COMMON_COMMANDS, counts["executed_commands"])
    for p in _subset(rng, files, int(rng.integers(1, 4))):  # echo real paths
        commands.append(_ECHO_TEMPLATES[rng.integers(len(_ECHO_TEMPLATES))].format(p=p))
    rng.shuffle(commands)

    created = _draw(rng, _SERVICE_NAMES, counts["created_services"])
    started = _draw(rng, _SERVICE_NAMES, counts["started_services"])

    r = Report.empty(label=label, sample_id=sample_id)
    cats = r.categories
    cats["files"] = files
    cats["read_files"] = _subset(rng, files, counts["read_files"])
    cats["write_files"] = _subset(rng, files, counts["write_files"])
    cats["delete_files"] = _subset(rng, files, counts["delete_files"])
    cats["keys"] = keys
    cats["read_keys"] = _subset(rng, keys, counts["read_keys"])
    cats["write_keys"] = _subset(rng, keys, counts["write_keys"])
    cats["delete_keys"] = _subset(rng, keys, counts["delete_keys"])
    cats["executed_commands"] = commands
    cats["resolved_apis"] = apis
    cats["mutexes"] = mutexes
    cats["created_services"] = created
    cats["started_services"] = started
    return r


def generate_corpus(spec: CorpusSpec) -> list[Report]:
    """Deterministic per spec.seed; each sample owns a spawned seed stream."""
    spec.validate()
    if spec.size == 0:
        return []
    names = [c for c, _ in spec.classes]
    weights = np.array([w for _, w in spec.classes], dtype=float)
    weights /= weights.sum()
    streams = np.random.SeedSequence(spec.seed).spawn(spec.size)
    out = []
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        label = names[rng.choice(len(names), p=weights)]
        out.append(_gen_report(rng, f"s{i:05d}", label, spec.profiles[label], spec.entry_scale))
    return out


# ---------------------------------------------------------------------------
# split / persistence


def split(corpus: list[Report], ratios: tuple[float, float, float] = (0.7, 0.15, 0.15), seed: int = 0) -> DatasetSplit:
    """Stratified by label, deterministic per seed."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise SplitError("ratios must be three non-negative numbers summing to 1")
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[str]] = {}
    for r in corpus:
        by_class.setdefault(r.label, []).append(r.sample_id)
    buckets: tuple[list[str], list[str], list[str]] = ([], [], [])
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        rng.shuffle(ids)
        n = len(ids)
        c1 = round(n * ratios[0])
        c2 = round(n * (ratios[0] + ratios[1]))
        buckets[0].extend(ids[:c1])
        buckets[1].extend(ids[c1:c2])
        buckets[2].extend(ids[c2:])
    if any(not b for b in buckets):
        raise SplitError(f"ratios {ratios} produce an empty split on {len(corpus)} samples")
    return DatasetSplit(train=buckets[0], val=buckets[1], test=buckets[2], ratios=tuple(ratios))


def save_jsonl(corpus: list[Report], path: str) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for r in corpus:
                fh.write(serialize_report(r) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_jsonl(path: str) -> list[Report]:
    out = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    out.append(parse_report(line))
                except (ParseError, SchemaError) as exc:
                    raise ParseError(str(exc), line=lineno) from exc
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return out
