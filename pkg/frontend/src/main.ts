/** Bootstrap: resolve the service URL, mount the app, resume from the hash.
 *
 * The service URL comes from (in order): a `window.CIRLOOP_SERVICE_URL`
 * global, a `config.json` next to the page, or the page's own origin.
 * An existing session id in the URL hash (#s=...) is resumed so a reload
 * mid-study reconstructs the identical view.
 */

import { SessionApi } from "./api.js";
import { StudyApp } from "./app.js";

declare global {
  interface Window {
    CIRLOOP_SERVICE_URL?: string;
    studyApp?: StudyApp;
  }
}

async function resolveServiceUrl(): Promise<string> {
  if (window.CIRLOOP_SERVICE_URL) {
    return window.CIRLOOP_SERVICE_URL;
  }
  try {
    const response = await fetch("./config.json");
    if (response.ok) {
      const config = (await response.json()) as { service_url?: string };
      if (config.service_url) return config.service_url;
    }
  } catch {
    // no config file: same-origin service
  }
  return window.location.origin;
}

async function boot(): Promise<void> {
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app mount point");
  const api = new SessionApi(await resolveServiceUrl());
  const app = new StudyApp(api, root);
  window.studyApp = app;
  await app.mount();
  const match = window.location.hash.match(/#s=(.+)/);
  if (match) {
    await app.refresh(decodeURIComponent(match[1]));
  }
}

void boot();
