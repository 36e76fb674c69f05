/** View controller for the human-in-loop study instrument.
 *
 * The app is a thin projection of the service payload: it keeps nothing
 * but the session id (plus the last payload it rendered), so a page
 * reload rebuilds the identical view from GET /v1/sessions/{id}. Every
 * round transition is exactly one service call, with the feedback form
 * locked while a request is in flight.
 */

import { ApiError, SessionApi } from "./api.js";
import type { SessionView } from "./types.js";

const PAGE_SIZE = 10;

export class StudyApp {
  private readonly api: SessionApi;
  private readonly root: HTMLElement;
  private readonly doc: Document;

  private sessionId: string | null = null;
  private view: SessionView | null = null;
  private page = 0;
  private inFlight = false;

  constructor(api: SessionApi, root: HTMLElement) {
    this.api = api;
    this.root = root;
    this.doc = root.ownerDocument;
  }

  get currentSessionId(): string | null {
    return this.sessionId;
  }

  get requestInFlight(): boolean {
    return this.inFlight;
  }

  /** Render the start form; gallery options come from the service. */
  async mount(): Promise<void> {
    this.root.innerHTML = "";
    this.root.appendChild(this.el("div", { id: "banner-area" }));
    const form = this.el("form", { id: "start-form" });
    form.addEventListener("submit", (event) => {
      event.preventDefault();
      void this.startFromForm();
    });

    const gallerySelect = this.el("select", { id: "gallery-select" }) as HTMLSelectElement;
    try {
      for (const gallery of await this.api.listGalleries()) {
        const option = this.doc.createElement("option");
        option.value = gallery.gallery_id;
        option.textContent = `${gallery.gallery_id} (${gallery.n} images)`;
        gallerySelect.appendChild(option);
      }
    } catch (error) {
      this.showError(error, () => this.mount());
      return;
    }

    form.append(
      this.labeled("Gallery", gallerySelect),
      this.labeled("Triplet id", this.el("input", { id: "triplet-input", type: "text" })),
      this.labeled("or reference id", this.el("input", { id: "ref-input", type: "text" })),
      this.labeled("initial caption", this.el("input", { id: "adhoc-caption", type: "text" })),
      this.labeled(
        "target ids (comma-sep)",
        this.el("input", { id: "targets-input", type: "text" }),
      ),
      this.labeled("Mode", this.modeSelect()),
      this.el("button", { id: "start-button", type: "submit" }, "Start session"),
    );
    this.root.appendChild(form);
    this.root.appendChild(this.el("div", { id: "session-root" }));
  }

  private modeSelect(): HTMLSelectElement {
    const select = this.el("select", { id: "mode-select" }) as HTMLSelectElement;
    for (const mode of ["study", "blind"]) {
      const option = this.doc.createElement("option");
      option.value = mode;
      option.textContent = mode;
      select.appendChild(option);
    }
    return select;
  }

  async startFromForm(): Promise<void> {
    const galleryId = this.value("gallery-select");
    const tripletId = this.value("triplet-input").trim();
    const mode = this.value("mode-select") as "study" | "blind";
    const request = tripletId
      ? { gallery_id: galleryId, triplet_id: tripletId, mode }
      : {
          gallery_id: galleryId,
          reference_id: this.value("ref-input").trim(),
          caption: this.value("adhoc-caption").trim(),
          target_ids: this.value("targets-input")
            .split(",")
            .map((t) => t.trim())
            .filter(Boolean),
          mode,
        };
    try {
      const view = await this.api.createSession(request);
      this.sessionId = view.session_id;
      this.page = 0;
      this.render(view);
    } catch (error) {
      // no session was created; surface the failure and stay on the form
      this.showError(error, () => this.startFromForm());
    }
  }

  /** Rebuild the whole view from the service (page reload / manual refresh). */
  async refresh(sessionId?: string): Promise<void> {
    const id = sessionId ?? this.sessionId;
    if (!id) return;
    try {
      const view = await this.api.getSession(id);
      this.sessionId = id;
      this.render(view);
    } catch (error) {
      this.showError(error, () => this.refresh(id));
    }
  }

  async submitFeedback(text: string): Promise<void> {
    if (!this.sessionId || this.inFlight) return;
    const caption = text.trim();
    if (!caption) {
      this.showBanner("Feedback must be non-empty.", null);
      return; // client-side validation: no request leaves the browser
    }
    this.inFlight = true;
    this.syncFormLock();
    try {
      const view = await this.api.postFeedback(this.sessionId, caption);
      this.page = 0;
      this.render(view);
    } catch (error) {
      if (error instanceof ApiError && error.status === 409) {
        await this.refresh(); // terminal: show the final state
      } else {
        this.showError(error, () => this.submitFeedback(caption));
      }
    } finally {
      this.inFlight = false;
      this.syncFormLock();
    }
  }

  // rendering ---------------------------------------------------------------

  render(view: SessionView): void {
    this.view = view;
    const mount = this.doc.getElementById("session-root") ?? this.root;
    mount.innerHTML = "";
    mount.append(
      this.statusBadge(view),
      ...(view.target ? [this.targetPane(view)] : []),
      this.candidateGrid(view),
      this.renderTimeline(view),
      this.feedbackForm(view),
    );
    this.syncFormLock();
  }

  private statusBadge(view: SessionView): HTMLElement {
    const badge = this.el("div", { id: "status-badge" });
    badge.dataset.kind = view.status.kind;
    let text = `round ${view.round} of ${view.r_max} — ${view.status.kind}`;
    if (view.status.kind === "hit" && view.status.rank != null) {
      text = `hit at round ${view.status.round} (rank ${view.status.rank})`;
    }
    badge.textContent = text;
    return badge;
  }

  private targetPane(view: SessionView): HTMLElement {
    const pane = this.el("div", { id: "target-pane" });
    pane.append(
      this.el("h3", {}, "Target image"),
      this.imageCard(view.target!.image_id, "target"),
    );
    return pane;
  }

  private candidateGrid(view: SessionView): HTMLElement {
    const section = this.el("div", { id: "candidate-section" });
    section.appendChild(this.el("h3", {}, `Candidates (round ${view.round})`));
    const grid = this.el("div", { id: "candidate-grid" });
    const start = this.page * PAGE_SIZE;
    for (const candidate of view.candidates.slice(start, start + PAGE_SIZE)) {
      const card = this.imageCard(candidate.image_id, "candidate");
      card.classList.add("candidate-card");
      card.appendChild(this.el("span", { class: "rank" }, `#${candidate.rank}`));
      grid.appendChild(card);
    }
    section.appendChild(grid);

    const pages = Math.max(1, Math.ceil(view.candidates.length / PAGE_SIZE));
    const pager = this.el("div", { id: "pager" });
    const prev = this.el("button", { id: "pager-prev", type: "button" }, "prev") as HTMLButtonElement;
    const next = this.el("button", { id: "pager-next", type: "button" }, "next") as HTMLButtonElement;
    prev.disabled = this.page === 0;
    next.disabled = this.page >= pages - 1;
    prev.addEventListener("click", () => {
      this.page = Math.max(0, this.page - 1);
      if (this.view) this.render(this.view);
    });
    next.addEventListener("click", () => {
      this.page = Math.min(pages - 1, this.page + 1);
      if (this.view) this.render(this.view);
    });
    pager.append(prev, this.el("span", {}, `page ${this.page + 1}/${pages}`), next);
    section.appendChild(pager);
    return section;
  }

  /** Per-round captions (and target ranks in study mode) plus terminal badge. */
  renderTimeline(view: SessionView): HTMLElement {
    const timeline = this.el("ol", { id: "timeline" });
    for (const entry of view.history) {
      const item = this.el("li", { class: "timeline-entry" });
      item.dataset.round = String(entry.round);
      let text = `round ${entry.round}: "${entry.caption}"`;
      if (entry.target_rank !== undefined) {
        text += ` — target rank ${entry.target_rank}`;
      }
      item.textContent = text;
      timeline.appendChild(item);
    }
    if (view.terminal) {
      const badge = this.el("li", { class: "timeline-entry terminal-badge" });
      badge.textContent = view.status.kind === "hit" ? "✔ hit" : `■ ${view.status.kind}`;
      timeline.appendChild(badge);
    }
    return timeline;
  }

  private feedbackForm(view: SessionView): HTMLElement {
    const form = this.el("form", { id: "feedback-form" });
    const input = this.el("input", {
      id: "feedback-input",
      type: "text",
      placeholder: "Describe how the candidate should change to match the target",
    }) as HTMLInputElement;
    const submit = this.el(
      "button",
      { id: "feedback-submit", type: "submit" },
      "Send feedback",
    ) as HTMLButtonElement;
    input.disabled = view.terminal;
    submit.disabled = view.terminal;
    form.append(input, submit);
    form.addEventListener("submit", (event) => {
      event.preventDefault();
      void this.submitFeedback(input.value);
    });
    return form;
  }

  private syncFormLock(): void {
    const input = this.doc.getElementById("feedback-input") as HTMLInputElement | null;
    const submit = this.doc.getElementById("feedback-submit") as HTMLButtonElement | null;
    const terminal = this.view?.terminal ?? false;
    if (input) input.disabled = terminal || this.inFlight;
    if (submit) submit.disabled = terminal || this.inFlight;
  }

  private imageCard(imageId: string, role: string): HTMLElement {
    const figure = this.el("figure", { class: `image-card ${role}` });
    const img = this.el("img", {
      src: this.api.imageUrl(imageId),
      alt: `${role} image ${imageId}`,
    }) as HTMLImageElement;
    img.addEventListener("error", () => {
      img.replaceWith(this.el("div", { class: "image-missing" }, imageId));
    });
    figure.append(img, this.el("figcaption", {}, imageId));
    return figure;
  }

  // error banners -----------------------------------------------------------

  showError(error: unknown, retry: (() => void | Promise<void>) | null): void {
    const message =
      error instanceof ApiError
        ? `${error.code}: ${error.message}`
        : `network failure: ${String(error)}`;
    this.showBanner(message, retry);
  }

  showBanner(message: string, retry: (() => void | Promise<void>) | null): void {
    const area = this.doc.getElementById("banner-area");
    if (!area) return;
    const banner = this.el("div", { class: "banner", role: "alert" });
    banner.appendChild(this.el("span", {}, message));
    if (retry) {
      const button = this.el("button", { class: "banner-retry", type: "button" }, "Retry");
      button.addEventListener("click", () => {
        banner.remove();
        void retry();
      });
      banner.appendChild(button);
    }
    const dismiss = this.el("button", { class: "banner-dismiss", type: "button" }, "×");
    dismiss.addEventListener("click", () => banner.remove());
    banner.appendChild(dismiss);
    area.appendChild(banner);
  }

  // small DOM helpers ---------------------------------------------------------

  private el(tag: string, attrs: Record<string, string> = {}, text?: string): HTMLElement {
    const node = this.doc.createElement(tag);
    for (const [key, value] of Object.entries(attrs)) {
      node.setAttribute(key, value);
    }
    if (text !== undefined) node.textContent = text;
    return node;
  }

  private labeled(label: string, control: HTMLElement): HTMLElement {
    const wrap = this.el("label", { class: "field" });
    wrap.append(this.el("span", {}, label), control);
    return wrap;
  }

  private value(id: string): string {
    const node = this.doc.getElementById(id) as HTMLInputElement | HTMLSelectElement | null;
    return node ? node.value : "";
  }
}
