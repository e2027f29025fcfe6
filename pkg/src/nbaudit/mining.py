"""Literature mining: search, full-text retrieval, metadata and link extraction.

The client speaks the esearch/efetch XML protocol.  Fetched article XML is
cached on disk keyed by article id so re-runs are deterministic and can be
replayed offline.  Link extraction scans every text node and attribute value
of the article document, normalizes repository URLs to the canonical
``https://github.com/{owner}/{name}`` form, and counts what it had to skip.
"""

from __future__ import annotations

import logging
import re
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import requests

from .errors import (
    MissingArticleError,
    RecordRejectedError,
    ServiceParseError,
    TransportError,
    XmlParseError,
)
from .ratelimit import TokenBucket

log = logging.getLogger(__name__)

__all__ = [
    "SearchRequest",
    "ArticleRecord",
    "JournalRecord",
    "AuthorRecord",
    "RepoLink",
    "LinkScanStats",
    "EntrezClient",
    "parse_article",
    "extract_repo_links",
    "scan_links",
    "normalize_orcid",
]

SOURCE_LOCATIONS = ("abstract", "body", "data_availability", "supplementary", "other")

_CANONICAL_RE = re.compile(r"^https://github\.com/[^/]+/[^/]+$")
_OWNER_RE = re.compile(r"^[A-Za-z0-9](?:[A-Za-z0-9-]*[A-Za-z0-9])?$")
_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")
_ORCID_RE = re.compile(r"^\d{4}-\d{4}-\d{4}-\d{3}[\dX]$")

# First path segments on the code-hosting site that are site features, not
# user accounts.  "orgs" is the organization-page prefix.
_RESERVED_SEGMENTS = frozenset({
    "about", "apps", "blog", "collections", "contact", "explore", "features",
    "join", "login", "marketplace", "notifications", "orgs", "pricing",
    "search", "settings", "site", "sponsors", "topics", "trending",
})

_NBVIEWER_HOSTS = frozenset({"nbviewer.jupyter.org", "nbviewer.org", "nbviewer.ipython.org"})

_CANDIDATE_RE = re.compile(
    r"(?:https?://)?(?:www\.)?"
    r"(?:nbviewer\.(?:jupyter\.org|ipython\.org|org)|gist\.github\.com|"
    r"raw\.githubusercontent\.com|github\.com|[A-Za-z0-9-]+\.github\.io)"
    r"(?:/[^\s<>\"'\)\]\},;]*)?",
    re.IGNORECASE,
)

_TRAILING_PUNCT = ".,;:)]}>'\""


# ---------------------------------------------------------------------------
# domain types


@dataclass
class SearchRequest:
    query: str
    max_results: int = 10000
    date_cutoff: str | None = None  # inclusive upper publication date YYYY/MM/DD

    def __post_init__(self):
        if not self.query or not self.query.strip():
            raise ValueError("query must be non-empty")
        if self.max_results < 1:
            raise ValueError("max_results must be >= 1")


@dataclass
class JournalRecord:
    title: str = ""
    issn: str | None = None
    nlm_abbrev: str | None = None
    iso_abbrev: str | None = None

    def __post_init__(self):
        if not self.title and not self.issn:
            raise ValueError("journal needs at least one of issn/title")


@dataclass
class AuthorRecord:
    given_name: str = ""
    family_name: str = ""
    orcid: str | None = None
    email: str | None = None


@dataclass
class RepoLink:
    raw_url: str
    owner: str
    name: str
    canonical_url: str = ""
    source_location: str = "other"

    def __post_init__(self):
        if not self.owner or not self.name:
            raise ValueError("owner and name must be non-empty")
        if not self.canonical_url:
            self.canonical_url = f"https://github.com/{self.owner}/{self.name}"
        if not _CANONICAL_RE.match(self.canonical_url):
            raise ValueError(f"non-canonical url {self.canonical_url!r}")
        if self.source_location not in SOURCE_LOCATIONS:
            raise ValueError(f"bad source_location {self.source_location!r}")

    @property
    def key(self) -> tuple[str, str]:
        """Case-folded identity used for deduplication."""
        return (self.owner.lower(), self.name.lower())


@dataclass
class ArticleRecord:
    pmc_id: str
    title: str = ""
    pubmed_id: str | None = None
    doi: str | None = None
    publisher_id: str | None = None
    publisher_name: str | None = None
    subject: str | None = None
    article_type: str | None = None
    date_received: date | None = None
    date_accepted: date | None = None
    date_published: date | None = None
    license: str | None = None
    copyright_statement: str | None = None
    keywords: list[str] = field(default_factory=list)
    mesh_terms: list[str] = field(default_factory=list)
    repo_links: list[RepoLink] = field(default_factory=list)
    journal: JournalRecord | None = None
    authors: list[AuthorRecord] = field(default_factory=list)

    def __post_init__(self):
        if not self.pmc_id:
            raise RecordRejectedError("article without PMC id")
        seen = set()
        for link in self.repo_links:
            if link.key in seen:
                raise ValueError(f"duplicate repo link {link.canonical_url}")
            seen.add(link.key)


@dataclass
class LinkScanStats:
    """What the link scanner saw besides usable repository links."""

    repo_mentions: int = 0  # parseable owner/name mentions before dedup
    owner_only: int = 0  # user or organization pages
    pages_sites: int = 0  # *.github.io
    gists: int = 0
    raw_files: int = 0
    invalid: int = 0  # matched a hosting host but not a usable owner/name
    duplicates: int = 0


# ---------------------------------------------------------------------------
# ORCID


def normalize_orcid(value: str | None) -> str | None:
    """Return the bare 16-digit hyphenated ORCID, or None if invalid.

    Accepts URL forms (https://orcid.org/0000-...).  Validity requires the
    hyphenated pattern and the ISO 7064 11-2 check digit.
    """
    if not value:
        return None
    text = value.strip().rstrip("/")
    if "/" in text:
        text = text.rsplit("/", 1)[-1]
    text = text.upper()
    if not _ORCID_RE.match(text):
        return None
    digits = text.replace("-", "")
    total = 0
    for ch in digits[:-1]:
        total = (total + int(ch)) * 2
    remainder = total % 11
    check = (12 - remainder) % 11
    expected = "X" if check == 10 else str(check)
    if digits[-1] != expected:
        return None
    return text


# ---------------------------------------------------------------------------
# service client


class EntrezClient:
    """Thin esearch/efetch client with rate limiting, retries, and a disk cache."""

    def __init__(self, base_url: str, cache_dir: str | Path,
                 api_key: str = "", rate_limiter: TokenBucket | None = None,
                 retries: int = 3, timeout: float = 30.0,
                 session: requests.Session | None = None,
                 sleep=time.sleep):
        self.base_url = base_url.rstrip("/")
        self.cache_dir = Path(cache_dir)
        self.api_key = api_key
        self.limiter = rate_limiter or TokenBucket(3.0, burst=3)
        self.retries = retries
        self.timeout = timeout
        self.session = session or requests.Session()
        self._sleep = sleep

    def _get(self, path: str, params: dict) -> requests.Response:
        url = f"{self.base_url}/{path}"
        if self.api_key:
            params = dict(params, api_key=self.api_key)
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                self._sleep(0.5 * (2 ** (attempt - 1)))
            self.limiter.acquire()
            try:
                resp = self.session.get(url, params=params, timeout=self.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                log.warning("transport error on %s (attempt %d): %s", path, attempt + 1, exc)
                continue
            if resp.status_code in (429,) or resp.status_code >= 500:
                last_exc = TransportError(f"{path} returned {resp.status_code}")
                log.warning("retryable status %d on %s (attempt %d)",
                            resp.status_code, path, attempt + 1)
                continue
            return resp
        raise TransportError(f"giving up on {path} after {self.retries + 1} attempts: {last_exc}")

    def search(self, req: SearchRequest) -> list[str]:
        """esearch → list of article ids, in service order."""
        params = {
            "db": "pmc",
            "term": req.query,
            "retmax": str(req.max_results),
            "retmode": "xml",
        }
        if req.date_cutoff:
            params["datetype"] = "pdat"
            params["mindate"] = "1800/01/01"
            params["maxdate"] = req.date_cutoff
        resp = self._get("esearch.fcgi", params)
        if resp.status_code != 200:
            raise TransportError(f"search failed with status {resp.status_code}")
        try:
            root = ET.fromstring(resp.text)
        except ET.ParseError as exc:
            raise ServiceParseError(f"unparseable search response: {exc}",
                                    payload_excerpt=resp.text[:500]) from exc
        error = root.find(".//ERROR")
        if error is not None:
            raise ServiceParseError(f"service error: {error.text}",
                                    payload_excerpt=resp.text[:500])
        ids = [el.text.strip() for el in root.findall(".//IdList/Id") if el.text]
        return ids[: req.max_results]

    def _cache_path(self, pmc_id: str) -> Path:
        safe = re.sub(r"[^A-Za-z0-9_.-]", "_", pmc_id)
        return self.cache_dir / f"{safe}.xml"

    def fetch_article_xml(self, pmc_id: str) -> str:
        """efetch → raw JATS XML text, disk-cached on success."""
        if not pmc_id:
            raise ValueError("pmc_id must be non-empty")
        cache_file = self._cache_path(pmc_id)
        if cache_file.exists():
            return cache_file.read_text(encoding="utf-8")
        resp = self._get("efetch.fcgi", {
            "db": "pmc",
            "id": pmc_id.removeprefix("PMC"),
            "retmode": "xml",
        })
        if resp.status_code == 404:
            raise MissingArticleError(f"no article for {pmc_id}")
        if resp.status_code != 200:
            raise TransportError(f"efetch failed with status {resp.status_code}")
        text = resp.text
        try:
            root = ET.fromstring(text)
        except ET.ParseError as exc:
            raise XmlParseError(
                f"article XML for {pmc_id} is not well-formed at "
                f"line {exc.position[0]}, column {exc.position[1]}",
                offset=exc.position,
            ) from exc
        if _find_article(root) is None:
            raise MissingArticleError(f"service returned no article body for {pmc_id}")
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        tmp = cache_file.with_suffix(".tmp")
        tmp.write_text(text, encoding="utf-8")
        tmp.replace(cache_file)
        return text


def search_articles(req: SearchRequest, client: EntrezClient) -> list[str]:
    """Module-level convenience wrapper over :meth:`EntrezClient.search`."""
    return client.search(req)


# ---------------------------------------------------------------------------
# JATS parsing


def _strip_ns(tag) -> str:
    if not isinstance(tag, str):
        return ""
    return tag.rsplit("}", 1)[-1]


def _find_article(root: ET.Element) -> ET.Element | None:
    if _strip_ns(root.tag) == "article":
        return root
    for el in root.iter():
        if _strip_ns(el.tag) == "article":
            return el
    return None


def _text_of(el: ET.Element | None) -> str:
    if el is None:
        return ""
    return re.sub(r"\s+", " ", "".join(el.itertext())).strip()


def _parse_date(el: ET.Element | None) -> date | None:
    if el is None:
        return None
    parts = {}
    for child in el:
        tag = _strip_ns(child.tag)
        if tag in ("day", "month", "year") and child.text and child.text.strip().isdigit():
            parts[tag] = int(child.text.strip())
    if "year" not in parts:
        return None
    try:
        return date(parts["year"], parts.get("month", 1), parts.get("day", 1))
    except ValueError:
        return None


def _first(el: ET.Element, path_tags: str) -> ET.Element | None:
    """Find the first descendant matching a '/'-joined local-name path."""
    current = [el]
    for want in path_tags.split("/"):
        nxt = []
        for node in current:
            for child in node:
                if _strip_ns(child.tag) == want:
                    nxt.append(child)
        current = nxt
        if not current:
            return None
    return current[0]


def _iter_local(el: ET.Element, name: str):
    for node in el.iter():
        if _strip_ns(node.tag) == name:
            yield node


def parse_article(xml_text: str) -> ArticleRecord:
    """Parse one JATS article document into an :class:`ArticleRecord`.

    Fields absent from the XML stay empty; nothing is fabricated.  Raises
    :class:`RecordRejectedError` when the document has no PMC id and
    :class:`XmlParseError` when the text is not well-formed XML.
    """
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise XmlParseError(
            f"not well-formed at line {exc.position[0]}, column {exc.position[1]}",
            offset=exc.position,
        ) from exc
    article = _find_article(root)
    if article is None:
        raise RecordRejectedError("document contains no article element")

    ids: dict[str, str] = {}
    for el in _iter_local(article, "article-id"):
        kind = el.get("pub-id-type", "")
        if el.text:
            ids[kind] = el.text.strip()
    pmc_id = ids.get("pmc") or ids.get("pmcid") or ""
    if pmc_id.isdigit():
        pmc_id = f"PMC{pmc_id}"
    if not pmc_id:
        raise RecordRejectedError("article without PMC id")

    front = _first(article, "front")
    meta = _first(front, "article-meta") if front is not None else None
    journal_meta = _first(front, "journal-meta") if front is not None else None

    journal = None
    if journal_meta is not None:
        issn = None
        issn_el = next(_iter_local(journal_meta, "issn"), None)
        if issn_el is not None and issn_el.text:
            issn = issn_el.text.strip()
        nlm = iso = None
        for jid in _iter_local(journal_meta, "journal-id"):
            jtype = jid.get("journal-id-type", "")
            if jtype == "nlm-ta" and jid.text:
                nlm = jid.text.strip()
            elif jtype == "iso-abbrev" and jid.text:
                iso = jid.text.strip()
        jtitle = _text_of(next(_iter_local(journal_meta, "journal-title"), None))
        if jtitle or issn:
            journal = JournalRecord(title=jtitle, issn=issn, nlm_abbrev=nlm, iso_abbrev=iso)

    title = ""
    publisher_name = subject = None
    received = accepted = published = None
    license_text = copyright_statement = None
    keywords: list[str] = []
    mesh_terms: list[str] = []
    authors: list[AuthorRecord] = []

    if journal_meta is not None:
        publisher_name = _text_of(_first(journal_meta, "publisher/publisher-name")) or None

    if meta is not None:
        title = _text_of(_first(meta, "title-group/article-title"))
        subj = _first(meta, "article-categories/subj-group/subject")
        subject = _text_of(subj) or None

        history = _first(meta, "history")
        if history is not None:
            for d in _iter_local(history, "date"):
                dtype = d.get("date-type", "")
                if dtype == "received":
                    received = _parse_date(d)
                elif dtype == "accepted":
                    accepted = _parse_date(d)
        pub_dates = [el for el in meta if _strip_ns(el.tag) == "pub-date"]
        epub = [el for el in pub_dates if el.get("pub-type") == "epub"
                or el.get("date-type") == "pub"]
        published = _parse_date((epub or pub_dates or [None])[0])

        permissions = _first(meta, "permissions")
        if permissions is not None:
            cp = next(_iter_local(permissions, "copyright-statement"), None)
            copyright_statement = _text_of(cp) or None
            lic = next(_iter_local(permissions, "license"), None)
            if lic is not None:
                href = lic.get("{http://www.w3.org/1999/xlink}href") or lic.get("href")
                license_text = href or (_text_of(lic) or None)

        for group in _iter_local(meta, "kwd-group"):
            gtype = (group.get("kwd-group-type") or "").lower()
            bucket = mesh_terms if gtype == "mesh" else keywords
            for kwd in _iter_local(group, "kwd"):
                text = _text_of(kwd)
                if text:
                    bucket.append(text)

        for contrib in _iter_local(meta, "contrib"):
            if contrib.get("contrib-type", "author") != "author":
                continue
            given = _text_of(_first(contrib, "name/given-names"))
            family = _text_of(_first(contrib, "name/surname"))
            if not given and not family:
                continue
            orcid_raw = None
            for cid in _iter_local(contrib, "contrib-id"):
                if cid.get("contrib-id-type") == "orcid" and cid.text:
                    orcid_raw = cid.text.strip()
            orcid = normalize_orcid(orcid_raw)
            if orcid_raw and not orcid:
                log.warning("dropping malformed ORCID %r for %s %s", orcid_raw, given, family)
            email_el = next(_iter_local(contrib, "email"), None)
            email = (email_el.text or "").strip() if email_el is not None else ""
            authors.append(AuthorRecord(given_name=given, family_name=family,
                                        orcid=orcid, email=email or None))

    links, _stats = scan_links(xml_text)
    return ArticleRecord(
        pmc_id=pmc_id,
        title=title,
        pubmed_id=ids.get("pmid"),
        doi=ids.get("doi"),
        publisher_id=ids.get("publisher-id"),
        publisher_name=publisher_name,
        subject=subject,
        article_type=article.get("article-type"),
        date_received=received,
        date_accepted=accepted,
        date_published=published,
        license=license_text,
        copyright_statement=copyright_statement,
        keywords=keywords,
        mesh_terms=mesh_terms,
        repo_links=links,
        journal=journal,
        authors=authors,
    )


# ---------------------------------------------------------------------------
# link extraction


def _location_for(tag: str, attrs: dict, parent_loc: str) -> str:
    if tag == "abstract":
        return "abstract"
    sec_type = (attrs.get("sec-type") or attrs.get("notes-type") or "").lower().replace(" ", "-")
    if tag in ("sec", "notes") and sec_type.startswith("data-availability"):
        return "data_availability"
    if tag == "supplementary-material":
        return "supplementary"
    if tag == "body" and parent_loc == "other":
        return "body"
    return parent_loc


def _iter_text_with_location(root: ET.Element):
    """Yield (text, location) for every text node and attribute value."""

    def walk(el: ET.Element, loc: str):
        loc = _location_for(_strip_ns(el.tag), el.attrib, loc)
        if el.text:
            yield el.text, loc
        for value in el.attrib.values():
            yield value, loc
        for child in el:
            yield from walk(child, loc)
            if child.tail:
                # tail text sits after the child's end tag, i.e. in el
                yield child.tail, loc
    yield from walk(root, "other")


def _classify_candidate(candidate: str) -> tuple[str, str | None, str | None]:
    """Map one matched URL candidate to (category, owner, name).

    Categories: repo, owner_only, pages, gist, raw, invalid.
    """
    text = candidate.strip().strip("​")
    while text and text[-1] in _TRAILING_PUNCT:
        text = text[:-1]
    text = re.sub(r"^https?://", "", text, flags=re.IGNORECASE)
    text = re.sub(r"^www\.", "", text, flags=re.IGNORECASE)
    text = text.split("?", 1)[0].split("#", 1)[0].rstrip("/")
    host, _, path = text.partition("/")
    host = host.lower()

    if host.endswith(".github.io"):
        return ("pages", None, None)
    if host == "gist.github.com":
        return ("gist", None, None)
    if host == "raw.githubusercontent.com":
        return ("raw", None, None)
    if host in _NBVIEWER_HOSTS:
        segments = [s for s in path.split("/") if s]
        if len(segments) >= 3 and segments[0].lower() == "github":
            segments = segments[1:]
        elif segments and segments[0].lower() == "gist":
            return ("gist", None, None)
        else:
            return ("invalid", None, None)
        path = "/".join(segments)
        host = "github.com"
    if host != "github.com":
        return ("invalid", None, None)

    segments = [s for s in path.split("/") if s]
    if not segments:
        return ("invalid", None, None)
    if segments[0].lower() in _RESERVED_SEGMENTS:
        if segments[0].lower() == "orgs":
            return ("owner_only", None, None)
        return ("invalid", None, None)
    if len(segments) == 1:
        return ("owner_only", None, None)
    owner, name = segments[0], segments[1]
    name = re.sub(r"\.git$", "", name, flags=re.IGNORECASE)
    if not _OWNER_RE.match(owner) or not _NAME_RE.match(name) or name in (".", ".."):
        return ("invalid", None, None)
    return ("repo", owner, name)


def scan_links(xml_text: str) -> tuple[list[RepoLink], LinkScanStats]:
    """Extract deduplicated repository links plus counts of skipped candidates."""
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise XmlParseError(
            f"not well-formed at line {exc.position[0]}, column {exc.position[1]}",
            offset=exc.position,
        ) from exc

    links: list[RepoLink] = []
    stats = LinkScanStats()
    seen: set[tuple[str, str]] = set()
    for text, location in _iter_text_with_location(root):
        for match in _CANDIDATE_RE.finditer(text):
            category, owner, name = _classify_candidate(match.group(0))
            if category == "repo":
                stats.repo_mentions += 1
                link = RepoLink(raw_url=match.group(0), owner=owner, name=name,
                                source_location=location)
                if link.key in seen:
                    stats.duplicates += 1
                    continue
                seen.add(link.key)
                links.append(link)
            elif category == "owner_only":
                stats.owner_only += 1
            elif category == "pages":
                stats.pages_sites += 1
            elif category == "gist":
                stats.gists += 1
            elif category == "raw":
                stats.raw_files += 1
            else:
                stats.invalid += 1
    return links, stats


def extract_repo_links(xml_text: str) -> list[RepoLink]:
    """Normalized, case-insensitively deduplicated repository links."""
    links, _ = scan_links(xml_text)
    return links
